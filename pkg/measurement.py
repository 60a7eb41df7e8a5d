"""
Position-only measurement calculus.

A device is a finite orthonormal family |a_i⟩ on the grid plus a table of pointer positions x_i.
Outcome probabilities come out two ways, as overlaps |⟨a_i|ψ⟩|² and as pointer densities after
the unitary U|a_i⟩ = |x_i⟩, and the two must agree. Mass outside the device subspace is kept as
a separate no-click outcome rather than renormalized away.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np
from scipy.linalg import null_space
from scipy.stats import chisquare

from errors import (
    DensitySupportError,
    InvalidInputError,
    NonOrthonormalBasisError,
    NonStochasticMatrixError,
    NonUnitaryError,
    NormalizationError,
    PointerMapError,
    SupportMismatchError,
    ZeroProbabilityOutcomeError,
)
from inference import Classification, Distribution, JointDistribution
from wavefield import (
    RHO_MIN_SCALE,
    Boundary,
    Grid1D,
    UnitSystem,
    WaveFunction,
    decompose,
    harmonic_eigenstates,
)

if TYPE_CHECKING:
    from schemas import DeviceSpec

logger = logging.getLogger(__name__)

MAX_BASIS_SIZE = 64
ORTHONORMALITY_TOL = 1e-10
UNITARITY_TOL = 1e-10
ZERO_PROBABILITY = 1e-14
SAME_STATE_TOL = 1e-10
STOCHASTIC_TOL = 1e-12
GOOD_DEVICE_DIAGONAL = 0.99
DENSITY_NORM_TOL = 1e-10


# ---------------------------------------------------------------------------
# Devices
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MeasurementDevice:
    """
    basis: (n, grid.n) amplitudes of |a_i⟩, orthonormal under Σ conj(a_i) a_j dx.
    pointer_indices: grid index of the pointer position x_i for each basis state.
    eigenvalues: λ_i = g(x_i), optional.
    """

    grid: Grid1D
    basis: np.ndarray
    pointer_indices: np.ndarray
    eigenvalues: Optional[np.ndarray] = None
    name: str = "device"
    boundary: Boundary = "dirichlet"
    units: UnitSystem = field(default_factory=UnitSystem)
    explicit_unitary: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        basis = np.array(self.basis, dtype=complex)
        if basis.ndim != 2 or basis.shape[1] != self.grid.n:
            raise InvalidInputError("basis states must be sampled on the device grid", context={"shape": basis.shape})
        n = basis.shape[0]
        if not 1 <= n <= MAX_BASIS_SIZE:
            raise InvalidInputError("device needs between 1 and 64 basis states", context={"n": n})
        gram = basis.conj() @ basis.T * self.grid.dx
        defect = float(np.max(np.abs(gram - np.eye(n))))
        if defect > ORTHONORMALITY_TOL:
            raise NonOrthonormalBasisError("basis states are not orthonormal", context={"max_defect": defect})

        pointers = np.array(self.pointer_indices, dtype=np.int64)
        if pointers.shape != (n,):
            raise PointerMapError("need exactly one pointer position per basis state")
        if np.any(pointers < 0) or np.any(pointers >= self.grid.n):
            raise PointerMapError("pointer positions must be grid points")
        if np.unique(pointers).size != n:
            raise PointerMapError("pointer map must be injective")

        eigenvalues = None if self.eigenvalues is None else np.array(self.eigenvalues, dtype=float)
        if eigenvalues is not None and eigenvalues.shape != (n,):
            raise InvalidInputError("need one eigenvalue per basis state")

        for name, value in (("basis", basis), ("pointer_indices", pointers), ("eigenvalues", eigenvalues)):
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def size(self) -> int:
        return self.basis.shape[0]

    @property
    def pointer_positions(self) -> np.ndarray:
        return self.grid.points[self.pointer_indices]

    def state(self, index: int, t: float = 0.0) -> WaveFunction:
        return WaveFunction(self.grid, self.basis[index], self.boundary, self.units, t)

    @cached_property
    def unitary(self) -> np.ndarray:
        """Grid-sized U with U|a_i⟩ = |x_i⟩, completed on the orthogonal complements."""
        if self.explicit_unitary is not None:
            u = np.asarray(self.explicit_unitary, dtype=complex)
            if u.shape != (self.grid.n, self.grid.n):
                raise NonUnitaryError("explicit unitary must act on the whole grid", context={"shape": u.shape})
        else:
            a = self.basis.T * np.sqrt(self.grid.dx)
            source = np.hstack([a, null_space(a.conj().T)])
            rest = np.setdiff1d(np.arange(self.grid.n), self.pointer_indices)
            target = np.eye(self.grid.n, dtype=complex)[:, np.concatenate([self.pointer_indices, rest])]
            u = target @ source.conj().T
        defect = float(np.max(np.abs(u.conj().T @ u - np.eye(self.grid.n))))
        if defect > UNITARITY_TOL:
            raise NonUnitaryError("device evolution is not unitary", context={"max_defect": defect})
        mapped = u @ (self.basis.T * np.sqrt(self.grid.dx))
        if np.max(np.abs(mapped[self.pointer_indices, np.arange(self.size)] - 1.0)) > UNITARITY_TOL:
            raise NonUnitaryError("device evolution does not send basis states to their pointer positions")
        return u


def harmonic_device(
    grid: Grid1D,
    count: int,
    omega: float = 1.0,
    units: UnitSystem = UnitSystem(),
    pointer_indices: Optional[Sequence[int]] = None,
    eigenvalues: Optional[Sequence[float]] = None,
) -> MeasurementDevice:
    """Lowest oscillator eigenstates of the grid Hamiltonian; eigenvalues default to their energies."""
    energies, states = harmonic_eigenstates(grid, count, omega, units)
    return MeasurementDevice(
        grid,
        np.array([s.amplitudes for s in states]),
        _default_pointers(grid, count) if pointer_indices is None else pointer_indices,
        energies if eigenvalues is None else eigenvalues,
        name=f"harmonic(n={count})",
        units=units,
    )


def plane_wave_device(
    grid: Grid1D,
    modes: Sequence[int],
    units: UnitSystem = UnitSystem(),
    pointer_indices: Optional[Sequence[int]] = None,
    eigenvalues: Optional[Sequence[float]] = None,
) -> MeasurementDevice:
    """Periodic plane waves e^{ik_j x}/√L with k_j = 2πj/L; eigenvalues default to ħk_j."""
    k = 2.0 * np.pi * np.asarray(modes, dtype=float) / grid.length
    basis = np.exp(1j * np.outer(k, grid.points)) / np.sqrt(grid.length)
    return MeasurementDevice(
        grid,
        basis,
        _default_pointers(grid, len(k)) if pointer_indices is None else pointer_indices,
        units.hbar * k if eigenvalues is None else eigenvalues,
        name=f"plane_waves(n={len(k)})",
        boundary="periodic",
        units=units,
    )


def grid_delta_device(
    grid: Grid1D,
    indices: Sequence[int],
    units: UnitSystem = UnitSystem(),
    pointer_indices: Optional[Sequence[int]] = None,
    eigenvalues: Optional[Sequence[float]] = None,
    boundary: Boundary = "dirichlet",
) -> MeasurementDevice:
    """Position eigenstates δ_{x_i}/√dx; by default each points at its own site."""
    indices = np.asarray(indices, dtype=np.int64)
    basis = np.eye(grid.n)[indices] / np.sqrt(grid.dx)
    return MeasurementDevice(
        grid,
        basis,
        indices if pointer_indices is None else pointer_indices,
        grid.points[indices] if eigenvalues is None else eigenvalues,
        name=f"grid_deltas(n={len(indices)})",
        boundary=boundary,
        units=units,
    )


def _default_pointers(grid: Grid1D, count: int) -> np.ndarray:
    """Evenly spread pointer sites over the middle half of the grid."""
    if count > grid.n // 2:
        return np.arange(count)
    return np.round(np.linspace(grid.n // 4, 3 * grid.n // 4, count)).astype(np.int64)


def device_from_spec(spec: "DeviceSpec", grid: Grid1D, units: UnitSystem = UnitSystem()) -> MeasurementDevice:
    if spec.preset == "harmonic":
        return harmonic_device(grid, spec.count, spec.omega, units, spec.pointer_indices, spec.eigenvalues)
    if spec.preset == "plane-wave":
        return plane_wave_device(grid, spec.modes, units, spec.pointer_indices, spec.eigenvalues)
    return grid_delta_device(grid, spec.indices, units, spec.pointer_indices, spec.eigenvalues)


def load_device(path: Union[str, Path], grid: Grid1D, units: UnitSystem = UnitSystem()) -> MeasurementDevice:
    """Read a JSON device description."""
    from schemas import DeviceSpec

    spec = DeviceSpec.model_validate_json(Path(path).read_text(encoding="utf-8"))
    return device_from_spec(spec, grid, units)


# ---------------------------------------------------------------------------
# Born rule, two routes
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BornDistribution:
    probabilities: np.ndarray
    pointer_positions: np.ndarray
    no_click: float

    @property
    def total(self) -> float:
        return float(self.probabilities.sum())

    def with_no_click(self) -> np.ndarray:
        return np.append(self.probabilities, self.no_click)


def _require_compatible(psi: WaveFunction, device: MeasurementDevice) -> None:
    if psi.grid != device.grid:
        raise SupportMismatchError("state and device live on different grids")


def amplitudes_in_basis(psi: WaveFunction, device: MeasurementDevice) -> np.ndarray:
    """c_i = ⟨a_i|ψ⟩."""
    _require_compatible(psi, device)
    return device.basis.conj() @ psi.amplitudes * psi.grid.dx


def born_probabilities(psi: WaveFunction, device: MeasurementDevice) -> BornDistribution:
    p = np.abs(amplitudes_in_basis(psi, device)) ** 2
    return BornDistribution(p, device.pointer_positions, max(0.0, 1.0 - float(p.sum())))


def apply_device(psi: WaveFunction, device: MeasurementDevice) -> WaveFunction:
    """|ψ′⟩ = U|ψ⟩ = Σ c_i |x_i⟩ + (component outside the device subspace)."""
    _require_compatible(psi, device)
    return psi.with_amplitudes(device.unitary @ psi.amplitudes)


def pointer_distribution(psi_after: WaveFunction, device: MeasurementDevice) -> BornDistribution:
    """|⟨x_i|ψ′⟩|² read off the pointer sites."""
    _require_compatible(psi_after, device)
    p = psi_after.density[device.pointer_indices] * psi_after.grid.dx
    return BornDistribution(p, device.pointer_positions, max(0.0, 1.0 - float(p.sum())))


def expectation_value(
    psi: WaveFunction,
    device: MeasurementDevice,
    eigenvalues: Optional[Sequence[float]] = None,
) -> float:
    """Σ λ_i p_i."""
    values = device.eigenvalues if eigenvalues is None else np.asarray(eigenvalues, dtype=float)
    if values is None:
        raise InvalidInputError("device has no eigenvalues")
    return float(np.sum(values * born_probabilities(psi, device).probabilities))


def pointer_expectation(psi: WaveFunction, device: MeasurementDevice) -> float:
    """Σ x_i |⟨x_i|Uψ⟩|², the expected pointer position on the unitary route."""
    after = pointer_distribution(apply_device(psi, device), device)
    return float(np.sum(after.pointer_positions * after.probabilities))


@dataclass(frozen=True, eq=False)
class EigenvalueDensity:
    eigenvalues: np.ndarray
    density: np.ndarray
    pointer_density: np.ndarray
    jacobian: np.ndarray


def eigenvalue_density(psi: WaveFunction, device: MeasurementDevice) -> EigenvalueDensity:
    """
    Born density per unit eigenvalue for a monotone pointer map λ = g(x):
    ρ_A(g(x_i)) = ρ_x(x_i) / |dg/dx|, with ρ_x the pointer probability per unit length.
    """
    if device.eigenvalues is None or device.size < 2:
        raise PointerMapError("a continuous-spectrum device needs at least two eigenvalues")
    order = np.argsort(device.pointer_positions)
    x = device.pointer_positions[order]
    g = device.eigenvalues[order]
    slopes = np.diff(g)
    if not (np.all(slopes > 0) or np.all(slopes < 0)):
        raise PointerMapError("pointer map must be strictly monotone")
    p = born_probabilities(psi, device).probabilities[order]
    pointer_density = p / np.gradient(x)
    jacobian = np.abs(np.gradient(g, x))
    return EigenvalueDensity(g, pointer_density / jacobian, pointer_density, jacobian)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OutcomeReport:
    probabilities: np.ndarray
    pointer_positions: np.ndarray
    counts: np.ndarray
    no_click_probability: float
    no_click_count: int
    seed: int

    @property
    def n_shots(self) -> int:
        return int(self.counts.sum()) + self.no_click_count

    def rows(self):
        """(outcome, pointer_x, prob, count); the no-click outcome has no pointer position."""
        for i, (x, p, c) in enumerate(zip(self.pointer_positions, self.probabilities, self.counts)):
            yield i, float(x), float(p), int(c)
        if self.no_click_probability > 0 or self.no_click_count:
            yield "no-click", None, self.no_click_probability, self.no_click_count


def outcome_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def simulate_outcomes(psi: WaveFunction, device: MeasurementDevice, n_shots: int, seed: int) -> OutcomeReport:
    if n_shots < 0:
        raise InvalidInputError("number of shots must be nonnegative")
    born = born_probabilities(psi, device)
    p = born.with_no_click()
    counts = outcome_generator(seed).multinomial(n_shots, p / p.sum())
    return OutcomeReport(born.probabilities, born.pointer_positions, counts[:-1], born.no_click, int(counts[-1]), seed)


def goodness_of_fit(report: OutcomeReport) -> float:
    """Chi-square p-value of the counts against the Born probabilities (zero-probability cells dropped)."""
    p = np.append(report.probabilities, report.no_click_probability)
    counts = np.append(report.counts, report.no_click_count)
    keep = p > ZERO_PROBABILITY
    if keep.sum() < 2:
        return 1.0
    expected = report.n_shots * p[keep] / p[keep].sum()
    return float(chisquare(counts[keep], expected).pvalue)


# ---------------------------------------------------------------------------
# Filtering, sequential measurement and preparation
# ---------------------------------------------------------------------------


def filter_update(psi: WaveFunction, device: MeasurementDevice, outcome: int) -> WaveFunction:
    """U†|x_k⟩ = |a_k⟩: the state after the filter passes outcome k."""
    p = born_probabilities(psi, device).probabilities
    if not 0 <= outcome < device.size:
        raise InvalidInputError("no such outcome", context={"outcome": outcome})
    if p[outcome] <= ZERO_PROBABILITY:
        raise ZeroProbabilityOutcomeError("outcome has zero probability", context={"outcome": outcome})
    return device.state(outcome, psi.t)


@dataclass(frozen=True)
class PreparationResult:
    classification: Classification
    overlap: float

    @property
    def feasible(self) -> bool:
        return self.classification is Classification.FULLY


def preparation_feasibility(
    device_a: MeasurementDevice,
    outcome_a: int,
    device_b: MeasurementDevice,
    outcome_b: int,
) -> PreparationResult:
    """Both eigenvalue constraints hold only if the eigenstates coincide up to a global phase."""
    if device_a.grid != device_b.grid:
        raise SupportMismatchError("devices live on different grids")
    overlap = float(abs(np.vdot(device_a.basis[outcome_a], device_b.basis[outcome_b]) * device_a.grid.dx))
    classification = Classification.FULLY if overlap >= 1.0 - SAME_STATE_TOL else Classification.OVER
    return PreparationResult(classification, overlap)


# ---------------------------------------------------------------------------
# Updating ψ by a density constraint
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DensityUpdate:
    state: WaveFunction
    phase: np.ndarray
    entropy_before: np.ndarray
    entropy_after: np.ndarray
    mask: np.ndarray

    @property
    def max_entropy_change(self) -> float:
        change = self.entropy_after[self.mask] - self.entropy_before[self.mask]
        return float(np.max(np.abs(np.angle(np.exp(1j * change))))) if change.size else 0.0


def density_constrained_update(psi: WaveFunction, rho_target: np.ndarray) -> DensityUpdate:
    """
    ψ′ = ρ_D^{1/2} e^{iφ′} with φ′ = φ - ½ log(ρ_D/ρ); the entropy field S = φ + ½ log ρ is kept.

    The entropy change is measured from the decomposed ψ′ (mod 2π) on the sites where both
    densities are above the node threshold.
    """
    rho_target = np.asarray(rho_target, dtype=float)
    grid = psi.grid
    if rho_target.shape != (grid.n,) or np.any(rho_target < 0) or not np.all(np.isfinite(rho_target)):
        raise InvalidInputError("target density must be a nonnegative array on the grid")
    total = float(rho_target.sum() * grid.dx)
    if abs(total - 1.0) > DENSITY_NORM_TOL:
        raise NormalizationError("target density is not normalized", context={"total": total})
    before = decompose(psi)
    if np.any((rho_target > 0) & ~before.mask):
        raise DensitySupportError("target density has support where the state vanishes")

    on = rho_target > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        phase = np.where(on, before.phase - 0.5 * np.log(np.where(on, rho_target / before.rho, 1.0)), np.nan)
    state = psi.with_amplitudes(np.where(on, np.sqrt(rho_target) * np.exp(1j * np.nan_to_num(phase)), 0.0))
    after = decompose(state)
    mask = before.mask & after.mask
    update = DensityUpdate(state, phase, before.entropy, after.entropy, mask)
    logger.debug("density-constrained update: max entropy change %.2e", update.max_entropy_change)
    return update


# ---------------------------------------------------------------------------
# Amplification
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AmplifierModel:
    """reliability[r, s] = P(α_r | x_s); every column is a probability distribution over α."""

    reliability: np.ndarray

    def __post_init__(self) -> None:
        r = np.array(self.reliability, dtype=float)
        if r.ndim != 2 or not np.all(np.isfinite(r)):
            raise NonStochasticMatrixError("reliability must be a finite 2-D matrix")
        if np.any(r < 0) or np.max(np.abs(r.sum(axis=0) - 1.0)) > STOCHASTIC_TOL:
            raise NonStochasticMatrixError("reliability columns must be probability distributions")
        r.setflags(write=False)
        object.__setattr__(self, "reliability", r)

    @classmethod
    def uniform_crosstalk(cls, n: int, diagonal: float) -> "AmplifierModel":
        off = (1.0 - diagonal) / (n - 1) if n > 1 else 0.0
        return cls(np.full((n, n), off) + (diagonal - off) * np.eye(n))

    @property
    def min_diagonal(self) -> float:
        return float(np.min(np.diag(self.reliability)))

    @property
    def is_good(self) -> bool:
        return self.min_diagonal >= GOOD_DEVICE_DIAGONAL


def amplify(position_probs: Sequence[float], amplifier: AmplifierModel) -> np.ndarray:
    """P(α_r) = Σ_s P(α_r|x_s) P(x_s)."""
    p = np.asarray(position_probs, dtype=float)
    if p.shape != (amplifier.reliability.shape[1],):
        raise SupportMismatchError("position probabilities must match the amplifier's inputs")
    return amplifier.reliability @ p


def amplifier_posterior(
    position_probs: Sequence[float],
    amplifier: AmplifierModel,
    reading: int,
    pointer_positions: Optional[Sequence[float]] = None,
) -> Distribution:
    """P(x | α_reading) by Bayes' theorem on the joint P(x) P(α|x)."""
    prior = Distribution.discrete(position_probs, pointer_positions)
    joint = JointDistribution.from_model(prior, amplifier.reliability.T)
    return joint.conditional(float(reading))
