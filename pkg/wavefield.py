"""
Grid wave functions and their two pictures.

Unitary Schrödinger propagation (Crank-Nicolson, optionally minimally coupled, or Fourier
split-step), the hydrodynamic decomposition into (ρ, φ, v, u, b, S), energy and
residual diagnostics for the continuity and phase equations, and momentum statistics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Literal, Optional, Sequence, Union

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.sparse import csc_matrix, diags
from scipy.sparse.linalg import splu
from scipy.special import eval_hermite, gammaln

from errors import (
    BoundaryDensityError,
    InsufficientCheckpointsError,
    InvalidInputError,
    NoValidRegionError,
    NormalizationError,
    PacketBoundaryError,
    SolverBreakdownError,
)

logger = logging.getLogger(__name__)

Boundary = Literal["dirichlet", "periodic"]
Scheme = Literal["crank-nicolson", "split-step"]
FieldFunction = Callable[[np.ndarray, float], np.ndarray]
FieldLike = Union[None, float, np.ndarray, FieldFunction]

NORM_TOL = 1e-10
# Densities below RHO_MIN_SCALE / dx are treated as nodes.
RHO_MIN_SCALE = 1e-12
BOUNDARY_DENSITY_RATIO = 1e-10
PACKET_CLEARANCE_SIGMAS = 6.0
DEFAULT_DT_FACTOR = 0.25
# Step used for numerical time derivatives of user-supplied fields.
TIME_DERIVATIVE_STEP = 1e-6


# ---------------------------------------------------------------------------
# Grid, units and states
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    dx: float
    n: int

    def __post_init__(self) -> None:
        if not (np.isfinite(self.dx) and self.dx > 0):
            raise InvalidInputError("grid spacing must be positive", context={"dx": self.dx})
        if self.n < 8:
            raise InvalidInputError("grid needs at least 8 points", context={"n": self.n})

    @classmethod
    def spanning(cls, x_min: float, x_max: float, dx: float) -> "Grid1D":
        """Grid with spacing dx whose last point is the closest one to x_max."""
        return cls(x_min, dx, int(round((x_max - x_min) / dx)) + 1)

    @property
    def points(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n)

    @property
    def x_max(self) -> float:
        return self.x_min + self.dx * (self.n - 1)

    @property
    def length(self) -> float:
        """Period of the grid when used with periodic boundaries."""
        return self.n * self.dx

    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.dx)


@dataclass(frozen=True)
class UnitSystem:
    """ħ, current mass m and osmotic mass μ (μ defaults to m)."""

    hbar: float = 1.0
    mass: float = 1.0
    osmotic_mass: Optional[float] = None

    def __post_init__(self) -> None:
        values = [self.hbar, self.mass] + ([self.osmotic_mass] if self.osmotic_mass is not None else [])
        if any(not (np.isfinite(v) and v > 0) for v in values):
            raise InvalidInputError("units must be positive", context={"hbar": self.hbar, "mass": self.mass})

    @property
    def mu(self) -> float:
        return self.mass if self.osmotic_mass is None else self.osmotic_mass


def default_time_step(grid: Grid1D, units: UnitSystem = UnitSystem()) -> float:
    return DEFAULT_DT_FACTOR * units.mass * grid.dx**2 / units.hbar


@dataclass(frozen=True, eq=False)
class WaveFunction:
    grid: Grid1D
    amplitudes: np.ndarray
    boundary: Boundary = "dirichlet"
    units: UnitSystem = field(default_factory=UnitSystem)
    t: float = 0.0

    def __post_init__(self) -> None:
        psi = np.array(self.amplitudes, dtype=complex)
        if psi.shape != (self.grid.n,):
            raise InvalidInputError("amplitudes must match the grid", context={"shape": psi.shape, "n": self.grid.n})
        if not np.all(np.isfinite(psi)):
            raise SolverBreakdownError("wave function has non-finite amplitudes", context={"t": self.t})
        if self.boundary not in ("dirichlet", "periodic"):
            raise InvalidInputError("boundary must be 'dirichlet' or 'periodic'", context={"boundary": self.boundary})
        norm = float(np.sum(np.abs(psi) ** 2) * self.grid.dx)
        if abs(norm - 1.0) > NORM_TOL:
            raise NormalizationError("wave function is not normalized", context={"norm": norm})
        psi.setflags(write=False)
        object.__setattr__(self, "amplitudes", psi)

    @classmethod
    def normalized(
        cls,
        grid: Grid1D,
        amplitudes: np.ndarray,
        boundary: Boundary = "dirichlet",
        units: UnitSystem = UnitSystem(),
        t: float = 0.0,
    ) -> "WaveFunction":
        psi = np.asarray(amplitudes, dtype=complex)
        norm = float(np.sum(np.abs(psi) ** 2) * grid.dx)
        if not norm > 0:
            raise NormalizationError("cannot normalize a zero wave function")
        return cls(grid, psi / np.sqrt(norm), boundary, units, t)

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    def norm(self) -> float:
        return float(np.sum(self.density) * self.grid.dx)

    def expectation(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.sum(self.density * f(self.grid.points)) * self.grid.dx)

    def with_amplitudes(self, amplitudes: np.ndarray, t: Optional[float] = None) -> "WaveFunction":
        return WaveFunction(self.grid, amplitudes, self.boundary, self.units, self.t if t is None else t)


# ----- initial states -----


def gaussian_packet(
    grid: Grid1D,
    x0: float,
    sigma0: float,
    k0: float = 0.0,
    *,
    chirp: float = 0.0,
    boundary: Boundary = "dirichlet",
    units: UnitSystem = UnitSystem(),
) -> WaveFunction:
    """ψ ∝ exp[-(x-x0)²/4σ0² + i k0 x + i chirp (x-x0)²], normalized on the grid."""
    if not sigma0 > 0:
        raise InvalidInputError("packet width must be positive", context={"sigma0": sigma0})
    clearance = PACKET_CLEARANCE_SIGMAS * sigma0
    if x0 - clearance < grid.x_min or x0 + clearance > grid.x_max:
        raise PacketBoundaryError(
            "packet must sit at least 6 widths from the domain edges",
            context={"x0": x0, "sigma0": sigma0, "x_min": grid.x_min, "x_max": grid.x_max},
        )
    x = grid.points
    psi = np.exp(-((x - x0) ** 2) / (4.0 * sigma0**2) + 1j * k0 * x + 1j * chirp * (x - x0) ** 2)
    return WaveFunction.normalized(grid, psi, boundary, units)


def plane_wave(grid: Grid1D, k: float, units: UnitSystem = UnitSystem(), t: float = 0.0) -> WaveFunction:
    """Periodic e^{i(kx - ħk²t/2m)}/√L; k should be a multiple of 2π/L."""
    omega = units.hbar * k**2 / (2.0 * units.mass)
    psi = np.exp(1j * (k * grid.points - omega * t)) / np.sqrt(grid.length)
    return WaveFunction(grid, psi, "periodic", units, t)


def eigenstates(
    grid: Grid1D,
    potential: FieldLike,
    count: int,
    units: UnitSystem = UnitSystem(),
) -> tuple[np.ndarray, list[WaveFunction]]:
    """Lowest `count` eigenpairs of the Dirichlet grid Hamiltonian, signed so the largest lobe is positive."""
    x = grid.points
    v = sample_field(potential, x, 0.0)
    hop = units.hbar**2 / (2.0 * units.mass * grid.dx**2)
    energies, vectors = eigh_tridiagonal(
        2.0 * hop + v,
        np.full(grid.n - 1, -hop),
        select="i",
        select_range=(0, count - 1),
    )
    states = []
    for column in vectors.T:
        column = column if column[np.argmax(np.abs(column))] > 0 else -column
        states.append(WaveFunction.normalized(grid, column, "dirichlet", units))
    return energies, states


def harmonic_potential(omega: float = 1.0, mass: float = 1.0) -> FieldFunction:
    return lambda x, t: 0.5 * mass * omega**2 * x**2


def harmonic_eigenstates(
    grid: Grid1D,
    count: int,
    omega: float = 1.0,
    units: UnitSystem = UnitSystem(),
    *,
    exact_discrete: bool = True,
) -> tuple[np.ndarray, list[WaveFunction]]:
    """
    Oscillator eigenstates. exact_discrete=True diagonalizes the grid Hamiltonian, so the
    states are stationary under the propagators; otherwise Hermite functions are sampled.
    """
    if exact_discrete:
        return eigenstates(grid, harmonic_potential(omega, units.mass), count, units)
    x = grid.points
    scale = np.sqrt(units.mass * omega / units.hbar)
    xi = scale * x
    states = []
    for level in range(count):
        log_norm = 0.5 * (np.log(scale / np.sqrt(np.pi)) - level * np.log(2.0) - gammaln(level + 1))
        psi = np.exp(log_norm - xi**2 / 2.0) * eval_hermite(level, xi)
        states.append(WaveFunction.normalized(grid, psi, "dirichlet", units))
    energies = units.hbar * omega * (np.arange(count) + 0.5)
    return energies, states


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------


def sample_field(value: FieldLike, x: np.ndarray, t: float) -> np.ndarray:
    """Evaluate None, a constant, an array or a callable f(x, t) on the grid."""
    if value is None:
        return np.zeros_like(x, dtype=float)
    raw = value(x, t) if callable(value) else value
    samples = np.broadcast_to(np.asarray(raw, dtype=float), x.shape)
    if not np.all(np.isfinite(samples)):
        raise InvalidInputError("field has non-finite samples", context={"t": t})
    return samples


def time_derivative(value: FieldLike, x: np.ndarray, t: float) -> np.ndarray:
    if not callable(value):
        return np.zeros_like(x, dtype=float)
    h = TIME_DERIVATIVE_STEP * max(1.0, abs(t))
    return (sample_field(value, x, t + h) - sample_field(value, x, t - h)) / (2.0 * h)


@dataclass(frozen=True)
class GaugeField:
    """
    Vector potential A, scalar potential V and coupling β = e/ħc.

    Gauge functions added by gauge_transform are kept as callables f(x, t) so that the
    discrete propagator can apply A + ∂f and V - ħβ∂_t f through exact differences of f.
    """

    vector_potential: FieldLike = None
    scalar_potential: FieldLike = None
    coupling: float = 1.0
    gauge_functions: tuple[FieldFunction, ...] = ()

    def with_gauge_function(self, f: FieldFunction) -> "GaugeField":
        return replace(self, gauge_functions=self.gauge_functions + (f,))

    def gauge_value(self, x: np.ndarray, t: float) -> np.ndarray:
        total = np.zeros_like(x, dtype=float)
        for f in self.gauge_functions:
            total = total + sample_field(f, x, t)
        return total

    def link_phases(self, grid: Grid1D, t: float, periodic: bool) -> np.ndarray:
        """θ_i = -β ∫_{x_i}^{x_{i+1}} A' dx for every link (the last one wraps when periodic)."""
        n_links = grid.n if periodic else grid.n - 1
        if self.vector_potential is None and not self.gauge_functions:
            return np.zeros(n_links)
        x = grid.points
        a = sample_field(self.vector_potential, x, t)
        a_next = np.roll(a, -1)
        integral = 0.5 * (a + a_next) * grid.dx
        if self.gauge_functions:
            g = self.gauge_value(x, t)
            jump = np.roll(g, -1) - g
            if periodic:
                # the wrap link spans one dx, not the whole domain
                g_wrap = self.gauge_value(np.array([grid.x_max + grid.dx]), t)[0]
                jump[-1] = g_wrap - g[-1]
            integral = integral + jump
        return -self.coupling * integral[:n_links]

    def vector_potential_at(self, x: np.ndarray, t: float) -> np.ndarray:
        a = sample_field(self.vector_potential, x, t)
        if self.gauge_functions:
            a = a + np.gradient(self.gauge_value(x, t), x)
        return a

    def scalar_potential_at(self, x: np.ndarray, t: float, hbar: float = 1.0) -> np.ndarray:
        v = sample_field(self.scalar_potential, x, t)
        for f in self.gauge_functions:
            v = v - hbar * self.coupling * time_derivative(f, x, t)
        return v


def gauge_transform(
    psi: WaveFunction,
    gauge: GaugeField,
    f: FieldFunction,
) -> tuple[WaveFunction, GaugeField]:
    """ψ' = e^{iβf}ψ, A' = A + ∂f, V' = V - ħβ∂_t f."""
    phase = gauge.coupling * sample_field(f, psi.grid.points, psi.t)
    return psi.with_amplitudes(psi.amplitudes * np.exp(1j * phase)), gauge.with_gauge_function(f)


# ---------------------------------------------------------------------------
# Propagation
# ---------------------------------------------------------------------------


class _CrankNicolsonKinetic:
    """Cayley step for the (minimally coupled) kinetic operator; LU reused while link phases stay fixed."""

    def __init__(self, psi: WaveFunction, gauge: GaugeField, dt: float) -> None:
        self.grid = psi.grid
        self.periodic = psi.periodic
        self.gauge = gauge
        self.c = 1j * dt * psi.units.hbar / (4.0 * psi.units.mass * psi.grid.dx**2)
        self._phases: Optional[np.ndarray] = None
        self._lu = None
        self._rhs = None
        self.factorizations = 0

    def _factorize(self, phases: np.ndarray) -> None:
        n, c = self.grid.n, self.c
        links = np.exp(1j * phases)
        upper = -c * links[: n - 1]
        lower = -c * np.conj(links[: n - 1])
        offsets = [0, 1, -1]
        lhs_diagonals = [np.full(n, 1.0 + 2.0 * c), upper, lower]
        rhs_diagonals = [np.full(n, 1.0 - 2.0 * c), -upper, -lower]
        if self.periodic:
            wrap = links[n - 1]
            offsets += [n - 1, -(n - 1)]
            lhs_diagonals += [np.array([-c * np.conj(wrap)]), np.array([-c * wrap])]
            rhs_diagonals += [np.array([c * np.conj(wrap)]), np.array([c * wrap])]
        lhs = diags(lhs_diagonals, offsets, shape=(n, n), format="csc", dtype=complex)
        self._rhs = diags(rhs_diagonals, offsets, shape=(n, n), format="csr", dtype=complex)
        self._lu = splu(csc_matrix(lhs))
        self._phases = phases
        self.factorizations += 1

    def __call__(self, amplitudes: np.ndarray, t_mid: float) -> np.ndarray:
        phases = self.gauge.link_phases(self.grid, t_mid, self.periodic)
        if self._phases is None or not np.array_equal(phases, self._phases):
            self._factorize(phases)
        return self._lu.solve(self._rhs @ amplitudes)


class _SplitStepKinetic:
    """Exact free propagation in Fourier space; the domain is treated as periodic."""

    def __init__(self, psi: WaveFunction, gauge: GaugeField, dt: float) -> None:
        if gauge.vector_potential is not None or gauge.gauge_functions:
            raise InvalidInputError("split-step propagation does not support a vector potential")
        k = psi.grid.wavenumbers()
        self.phase = np.exp(-1j * psi.units.hbar * k**2 * dt / (2.0 * psi.units.mass))

    def __call__(self, amplitudes: np.ndarray, t_mid: float) -> np.ndarray:
        return np.fft.ifft(self.phase * np.fft.fft(amplitudes))


@dataclass(frozen=True, eq=False)
class Evolution:
    """Checkpointed trajectory of a wave function."""

    states: tuple[WaveFunction, ...]
    dt: float
    max_norm_drift: float = 0.0
    scheme: str = "crank-nicolson"

    def __len__(self) -> int:
        return len(self.states)

    def __iter__(self) -> Iterator[WaveFunction]:
        return iter(self.states)

    def __getitem__(self, index: int) -> WaveFunction:
        return self.states[index]

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    @property
    def final(self) -> WaveFunction:
        return self.states[-1]

    def density_series(self) -> np.ndarray:
        return np.vstack([s.density for s in self.states])

    def expectation_series(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return np.array([s.expectation(f) for s in self.states])

    def at_time(self, t: float) -> WaveFunction:
        idx = int(np.argmin(np.abs(self.times - t)))
        return self.states[idx]


def _propagate(
    psi: WaveFunction,
    gauge: GaugeField,
    dt: Optional[float],
    steps: int,
    checkpoint_every: int,
    scheme: Scheme,
) -> Evolution:
    if dt is None:
        dt = default_time_step(psi.grid, psi.units)
    if not dt > 0:
        raise InvalidInputError("time step must be positive", context={"dt": dt})
    if steps < 1 or checkpoint_every < 1:
        raise InvalidInputError("steps and checkpoint interval must be positive")
    if scheme == "crank-nicolson":
        kinetic = _CrankNicolsonKinetic(psi, gauge, dt)
    elif scheme == "split-step":
        kinetic = _SplitStepKinetic(psi, gauge, dt)
    else:
        raise InvalidInputError("unknown propagation scheme", context={"scheme": scheme})

    x = psi.grid.points
    dx = psi.grid.dx
    hbar = psi.units.hbar
    beta = gauge.coupling
    half = dt / (2.0 * hbar)
    t0 = psi.t
    amplitudes = np.array(psi.amplitudes)
    norm = float(np.sum(np.abs(amplitudes) ** 2) * dx)
    max_drift = 0.0
    states = [psi]

    for step in range(steps):
        t = t0 + step * dt
        t_mid = t0 + (step + 0.5) * dt
        t_next = t0 + (step + 1) * dt
        entry = np.exp(-1j * half * sample_field(gauge.scalar_potential, x, t))
        exit_ = np.exp(-1j * half * sample_field(gauge.scalar_potential, x, t_next))
        if gauge.gauge_functions:
            g_mid = gauge.gauge_value(x, t_mid)
            entry = entry * np.exp(1j * beta * (g_mid - gauge.gauge_value(x, t)))
            exit_ = exit_ * np.exp(1j * beta * (gauge.gauge_value(x, t_next) - g_mid))
        amplitudes = exit_ * kinetic(entry * amplitudes, t_mid)

        new_norm = float(np.sum(np.abs(amplitudes) ** 2) * dx)
        if not np.isfinite(new_norm):
            raise SolverBreakdownError("propagation produced non-finite amplitudes", context={"t": t_next})
        max_drift = max(max_drift, abs(new_norm - norm))
        norm = new_norm
        if (step + 1) % checkpoint_every == 0 or step + 1 == steps:
            states.append(psi.with_amplitudes(amplitudes, t_next))

    logger.debug(
        "propagated %d steps (%s, dt=%.3g): max norm drift per step %.2e",
        steps,
        scheme,
        dt,
        max_drift,
    )
    return Evolution(tuple(states), dt, max_drift, scheme)


def evolve(
    psi: WaveFunction,
    potential: FieldLike = None,
    dt: Optional[float] = None,
    steps: int = 1,
    *,
    checkpoint_every: int = 1,
    scheme: Scheme = "crank-nicolson",
) -> Evolution:
    """
    Propagate iħ∂_tψ = -(ħ²/2m)∂²ψ + Vψ.

    The kinetic part is a Crank-Nicolson (Cayley) solve; V enters as exact half-step
    phases at both step endpoints, which keeps the step unitary and second order.
    """
    return _propagate(psi, GaugeField(scalar_potential=potential, coupling=0.0), dt, steps, checkpoint_every, scheme)


def evolve_gauged(
    psi: WaveFunction,
    gauge: GaugeField,
    dt: Optional[float] = None,
    steps: int = 1,
    *,
    checkpoint_every: int = 1,
) -> Evolution:
    """Minimal coupling iħ∂_tψ = (1/2m)(-iħ∂ - ħβA)²ψ + Vψ with Peierls link phases."""
    return _propagate(psi, gauge, dt, steps, checkpoint_every, "crank-nicolson")


# ---------------------------------------------------------------------------
# Hydrodynamic picture
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HydroFields:
    """Values outside `mask` (phase, entropy) or `velocity_mask` (v, u, b) are NaN."""

    rho: np.ndarray
    phase: np.ndarray
    v: np.ndarray
    u: np.ndarray
    b: np.ndarray
    entropy: np.ndarray
    mask: np.ndarray
    velocity_mask: np.ndarray
    grid: Grid1D
    boundary: Boundary
    units: UnitSystem
    t: float = 0.0


def _neighbourhood_mask(mask: np.ndarray, periodic: bool) -> np.ndarray:
    if periodic:
        return mask & np.roll(mask, 1) & np.roll(mask, -1)
    out = np.zeros_like(mask)
    out[1:-1] = mask[1:-1] & mask[:-2] & mask[2:]
    return out


def _mask_runs(mask: np.ndarray, periodic: bool) -> list[np.ndarray]:
    """Indices of each connected run of mask in grid order; on a ring a run may wrap past the end."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return []
    runs = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
    if periodic and len(runs) > 1 and runs[0][0] == 0 and runs[-1][-1] == mask.size - 1:
        runs = [np.concatenate([runs[-1], runs[0]])] + runs[1:-1]
    return runs


def _link_phase_differences(amplitudes: np.ndarray) -> np.ndarray:
    """angle(ψ_{i+1} ψ_i*) for i = 0..n-1; the last entry wraps around."""
    return np.angle(np.roll(amplitudes, -1) * np.conj(amplitudes))


def _central_difference(values: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(values, -1) - np.roll(values, 1)) / (2.0 * dx)


def decompose(psi: WaveFunction) -> HydroFields:
    """ψ = ρ^{1/2} e^{iφ} with v = (ħ/m)∂φ, u = -(ħ/2m)∂ log ρ, b = v - u and S = φ + ½ log ρ."""
    grid, units = psi.grid, psi.units
    rho = psi.density
    rho_min = RHO_MIN_SCALE / grid.dx
    mask = rho >= rho_min
    if not mask.any():
        raise NoValidRegionError("density is below the node threshold everywhere", context={"rho_min": rho_min})

    links = _link_phase_differences(psi.amplitudes)
    # phases are summed along links inside each run of the mask, never across a node
    phase = np.full(grid.n, np.nan)
    for run in _mask_runs(mask, psi.periodic):
        cumulative = np.concatenate([[0.0], np.cumsum(links[run[:-1]])])
        anchor = int(np.argmax(rho[run]))
        phase[run] = np.angle(psi.amplitudes[run[anchor]]) + cumulative - cumulative[anchor]

    velocity_mask = _neighbourhood_mask(mask, psi.periodic)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_rho = np.where(mask, np.log(np.where(mask, rho, 1.0)), np.nan)
        v = units.hbar / units.mass * (links + np.roll(links, 1)) / (2.0 * grid.dx)
        u = -units.hbar / (2.0 * units.mass) * _central_difference(log_rho, grid.dx)
    v = np.where(velocity_mask, v, np.nan)
    u = np.where(velocity_mask, u, np.nan)
    return HydroFields(
        rho=rho,
        phase=phase,
        v=v,
        u=u,
        b=v - u,
        entropy=phase + 0.5 * log_rho,
        mask=mask,
        velocity_mask=velocity_mask,
        grid=grid,
        boundary=psi.boundary,
        units=units,
        t=psi.t,
    )


def recompose(fields: HydroFields) -> WaveFunction:
    amplitudes = np.where(fields.mask, np.sqrt(fields.rho) * np.exp(1j * np.nan_to_num(fields.phase)), 0.0)
    return WaveFunction.normalized(fields.grid, amplitudes, fields.boundary, fields.units, fields.t)


def quantum_potential(psi: WaveFunction) -> np.ndarray:
    """Q = -(μħ²/2m²) ∂²ρ^{1/2} / ρ^{1/2} on the velocity mask (NaN elsewhere)."""
    fields = decompose(psi)
    units = psi.units
    r = np.sqrt(fields.rho)
    with np.errstate(divide="ignore", invalid="ignore"):
        laplacian = (np.roll(r, -1) - 2.0 * r + np.roll(r, 1)) / psi.grid.dx**2
        q = -units.mu * units.hbar**2 / (2.0 * units.mass**2) * laplacian / r
    return np.where(fields.velocity_mask, q, np.nan)


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------


def energy(psi: WaveFunction, potential: FieldLike = None, gauge: Optional[GaugeField] = None) -> float:
    """
    E = ∫ρ[½mv² + (μħ²/8m²)(∂ log ρ)² + V] on grid links.

    Current and osmotic terms are evaluated per link from R = ρ^{1/2} and the link phase
    difference; with μ = m the total equals the grid Hamiltonian's expectation value.
    """
    grid, units = psi.grid, psi.units
    x = grid.points
    r = np.abs(psi.amplitudes)
    links = _link_phase_differences(psi.amplitudes)
    if gauge is not None:
        links = links + _pad_links(gauge.link_phases(grid, psi.t, psi.periodic), grid.n)
        v_samples = gauge.scalar_potential_at(x, psi.t, units.hbar)
    else:
        v_samples = sample_field(potential, x, psi.t)
    r_next = np.roll(r, -1)
    current = 2.0 * r * r_next * (1.0 - np.cos(links))
    osmotic = (r_next - r) ** 2
    if not psi.periodic:
        # walls: ghost amplitudes outside the domain are zero
        current = current[:-1]
        osmotic = np.concatenate([osmotic[:-1], [r[0] ** 2, r[-1] ** 2]])
    prefactor = units.hbar**2 / (2.0 * units.mass * grid.dx)
    kinetic = prefactor * (np.sum(current) + units.mu / units.mass * np.sum(osmotic))
    return float(kinetic + np.sum(v_samples * psi.density) * grid.dx)


def _pad_links(phases: np.ndarray, n: int) -> np.ndarray:
    if phases.size == n:
        return phases
    return np.concatenate([phases, [0.0]])


def energy_series(evolution: Evolution, potential: FieldLike = None) -> np.ndarray:
    return np.array([energy(s, potential) for s in evolution])


def energy_drift(evolution: Evolution, potential: FieldLike = None) -> np.ndarray:
    """
    (E(t) - E(0)) / max(|E(0)|, T(0)) at every checkpoint, T being the kinetic energy.

    The kinetic floor keeps the ratio meaningful when a constant offset in V puts E(0) near zero;
    the drift is absolute when both vanish.
    """
    series = energy_series(evolution, potential)
    scale = max(abs(series[0]), energy(evolution.states[0]))
    if scale == 0.0:
        return series - series[0]
    return (series - series[0]) / scale


@dataclass(frozen=True, eq=False)
class PowerBalance:
    times: np.ndarray
    energy_rate: np.ndarray
    power: np.ndarray

    @property
    def max_relative_mismatch(self) -> float:
        """Largest |dE/dt - P| relative to max|P| over the series; P may change sign."""
        scale = max(float(np.max(np.abs(self.power))), 1e-300)
        return float(np.max(np.abs(self.energy_rate - self.power)) / scale)


def power_balance(evolution: Evolution, potential: FieldLike) -> PowerBalance:
    """dE/dt (centered over checkpoints) against ∫ρ ∂_tV at interior checkpoints."""
    if len(evolution) < 3:
        raise InsufficientCheckpointsError("power balance needs at least 3 checkpoints")
    series = energy_series(evolution, potential)
    times = evolution.times
    rate = (series[2:] - series[:-2]) / (times[2:] - times[:-2])
    power = np.array(
        [
            np.sum(s.density * time_derivative(potential, s.grid.points, s.t)) * s.grid.dx
            for s in evolution.states[1:-1]
        ]
    )
    return PowerBalance(times[1:-1], rate, power)


# ---------------------------------------------------------------------------
# Residual diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ResidualSeries:
    times: np.ndarray
    norms: np.ndarray

    @property
    def max(self) -> float:
        return float(np.max(self.norms))

    def at_time(self, t: float) -> float:
        return float(self.norms[int(np.argmin(np.abs(self.times - t)))])


def _states_of(trajectory: Union[Evolution, Sequence[WaveFunction]]) -> list[WaveFunction]:
    return list(trajectory.states if isinstance(trajectory, Evolution) else trajectory)


def fokker_planck_residual(trajectory: Union[Evolution, Sequence[WaveFunction]]) -> ResidualSeries:
    """
    L2 norm on the validity mask of ∂_tρ + ∂_x(vρ), with ∂_t centered over neighbouring
    checkpoints and ∂_x centered on the grid. One value per interior checkpoint.
    """
    states = _states_of(trajectory)
    if len(states) < 3:
        raise InsufficientCheckpointsError("continuity residual needs at least 3 checkpoints", context={"count": len(states)})
    times, norms = [], []
    for before, here, after in zip(states, states[1:], states[2:]):
        fields = decompose(here)
        dx = here.grid.dx
        drho_dt = (after.density - before.density) / (after.t - before.t)
        flux = np.where(fields.velocity_mask, fields.rho * fields.v, 0.0)
        divergence = _central_difference(flux, dx)
        valid = _neighbourhood_mask(fields.velocity_mask, here.periodic)
        residual = np.where(valid, drho_dt + divergence, 0.0)
        times.append(here.t)
        norms.append(float(np.sqrt(np.sum(residual**2) * dx)))
    return ResidualSeries(np.array(times), np.array(norms))


def phase_equation_residual(
    trajectory: Union[Evolution, Sequence[WaveFunction]],
    potential: FieldLike = None,
) -> ResidualSeries:
    """
    ρ-weighted L2 norm of ħ∂_tφ + ½mv² + V + Q between consecutive checkpoints.

    ∂_tφ comes from angle(ψ_{k+1} ψ_k*) so no unwrapping in time is needed; the other
    terms are averaged over the two checkpoints.
    """
    states = _states_of(trajectory)
    if len(states) < 2:
        raise InsufficientCheckpointsError("phase residual needs at least 2 checkpoints", context={"count": len(states)})
    times, norms = [], []
    for now, later in zip(states, states[1:]):
        units = now.units
        dt = later.t - now.t
        dphase_dt = np.angle(later.amplitudes * np.conj(now.amplitudes)) / dt
        terms = []
        for s in (now, later):
            fields = decompose(s)
            v_samples = sample_field(potential, s.grid.points, s.t)
            terms.append((0.5 * units.mass * fields.v**2 + v_samples + quantum_potential(s), fields.velocity_mask))
        valid = terms[0][1] & terms[1][1]
        residual = units.hbar * dphase_dt + 0.5 * (terms[0][0] + terms[1][0])
        weight = 0.5 * (now.density + later.density)
        residual = np.where(valid, residual, 0.0)
        mass = np.sum(np.where(valid, weight, 0.0))
        times.append(0.5 * (now.t + later.t))
        norms.append(float(np.sqrt(np.sum(weight * residual**2) / mass)))
    return ResidualSeries(np.array(times), np.array(norms))


# ---------------------------------------------------------------------------
# Momentum and uncertainty
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentumStats:
    mean_p: float
    var_p: float
    var_mv: float
    var_mu: float
    mean_x: float
    var_x: float

    @property
    def uncertainty_product(self) -> float:
        return float(np.sqrt(self.var_x * self.var_p))


def momentum_stats(psi: WaveFunction) -> MomentumStats:
    """
    Spectral <p̂>, Var p̂ next to the hydrodynamic split Var p̂ = Var(mv) + Var(mu).
    """
    grid, units = psi.grid, psi.units
    rho = psi.density
    if not psi.periodic:
        edge = max(rho[0], rho[-1])
        if edge > BOUNDARY_DENSITY_RATIO * rho.max():
            raise BoundaryDensityError(
                "density at the walls is too large for reliable moments",
                context={"edge_density": float(edge), "max_density": float(rho.max())},
            )
    spectrum = np.abs(np.fft.fft(psi.amplitudes)) ** 2
    spectrum = spectrum / spectrum.sum()
    k = grid.wavenumbers()
    mean_p = units.hbar * float(np.sum(k * spectrum))
    var_p = units.hbar**2 * float(np.sum(k**2 * spectrum)) - mean_p**2

    x = grid.points
    weights = rho * grid.dx
    mean_x = float(np.sum(weights * x))
    var_x = float(np.sum(weights * (x - mean_x) ** 2))

    fields = decompose(psi)
    on = fields.velocity_mask
    w = weights[on]
    v, u = fields.v[on], fields.u[on]
    mean_v = float(np.sum(w * v))
    var_mv = units.mass**2 * float(np.sum(w * (v - mean_v) ** 2))
    mean_u = float(np.sum(w * u))
    var_mu = units.mass**2 * float(np.sum(w * (u - mean_u) ** 2))
    return MomentumStats(mean_p, var_p, var_mv, var_mu, mean_x, var_x)


def current_momentum(psi: WaveFunction) -> float:
    """m<v> over the velocity mask."""
    fields = decompose(psi)
    on = fields.velocity_mask
    return psi.units.mass * float(np.sum(fields.rho[on] * fields.v[on]) * psi.grid.dx)
