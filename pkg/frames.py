"""
Extended Galilean frames x̃ = x + ξ(t).

The phase of the state shifts by (m/ħ)(ξ̇ x̃ + c(t)) with c(t) = -½∫₀ᵗ ξ̇² dt, the potential
picks up -m ξ̈ x̃, and densities are transported pointwise. verify_symmetry runs a scenario in
both frames on translated copies of one grid and reports how far the predictions differ.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.integrate import simpson

from errors import BoundaryDensityError, FrameClippingError, InvalidInputError, SuperluminalMotionError
from expressions import Expression, parse_expression
from wavefield import Evolution, FieldLike, Grid1D, UnitSystem, WaveFunction, evolve, sample_field

logger = logging.getLogger(__name__)

DEFAULT_QUADRATURE_STEP = 1e-3
CLIPPED_MASS_TOL = 1e-10
# Dirichlet comparisons stop being valid once this much mass sits in the outer WALL_CELLS cells
WALL_MASS_TOL = 1e-10
WALL_CELLS = 8
# phases are compared where ρ exceeds this fraction of its maximum
PHASE_MASK_RATIO = 1e-8
SMOOTHNESS_TOL = 1e-4
NONRELATIVISTIC_LIMIT = 0.3

TimeFunction = Callable[[float], float]


# ---------------------------------------------------------------------------
# Frame motions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameMotion:
    """Displacement ξ(t) of the tilde frame with its first two derivatives."""

    xi: TimeFunction
    xi_dot: TimeFunction
    xi_ddot: TimeFunction
    name: str = "custom"
    closed_form: bool = True

    @classmethod
    def rest(cls) -> "FrameMotion":
        zero = lambda t: 0.0
        return cls(zero, zero, zero, "rest")

    @classmethod
    def constant_velocity(cls, v0: float) -> "FrameMotion":
        return cls(lambda t: v0 * t, lambda t: v0, lambda t: 0.0, f"constant_velocity(v0={v0:g})")

    @classmethod
    def constant_acceleration(cls, g: float, v0: float = 0.0) -> "FrameMotion":
        return cls(
            lambda t: v0 * t + 0.5 * g * t**2,
            lambda t: v0 + g * t,
            lambda t: g,
            f"constant_acceleration(g={g:g})",
        )

    @classmethod
    def from_function(cls, xi: TimeFunction, step: float = 1e-4, name: str = "custom") -> "FrameMotion":
        """Derivatives by fourth-order central differences with spacing `step`."""
        if not step > 0:
            raise InvalidInputError("differencing step must be positive", context={"step": step})
        h = step

        def xi_dot(t: float) -> float:
            return (-xi(t + 2 * h) + 8 * xi(t + h) - 8 * xi(t - h) + xi(t - 2 * h)) / (12 * h)

        def xi_ddot(t: float) -> float:
            return (-xi(t + 2 * h) + 16 * xi(t + h) - 30 * xi(t) + 16 * xi(t - h) - xi(t - 2 * h)) / (12 * h**2)

        return cls(xi, xi_dot, xi_ddot, name, closed_form=False)

    @classmethod
    def from_expression(cls, expression: Union[str, Expression], step: float = 1e-4) -> "FrameMotion":
        """ξ(t) written in the expression language; only `t` may appear."""
        if isinstance(expression, str):
            expression = parse_expression(expression, variables=("t",))
        return cls.from_function(expression.as_time_function(), step, name=str(expression))

    def check_smooth(self, t_end: float, samples: int = 11) -> None:
        """Finite-difference ξ̈ must agree with itself at half the step across [0, t_end]."""
        if self.closed_form:
            return
        h = 1e-3 * max(1.0, t_end)
        for t in np.linspace(0.0, t_end, samples):
            coarse = (self.xi(t + h) - 2 * self.xi(t) + self.xi(t - h)) / h**2
            fine = (self.xi(t + h / 2) - 2 * self.xi(t) + self.xi(t - h / 2)) / (h / 2) ** 2
            if abs(coarse - fine) > SMOOTHNESS_TOL * (1.0 + abs(fine)) + 1e-3:
                raise InvalidInputError(
                    "frame displacement is not twice differentiable on the time span",
                    context={"t": float(t), "motion": self.name},
                )


def compose_motions(first: FrameMotion, second: FrameMotion) -> FrameMotion:
    """Moving by `first` and then by `second` is moving by ξ₁ + ξ₂."""
    return FrameMotion(
        lambda t: first.xi(t) + second.xi(t),
        lambda t: first.xi_dot(t) + second.xi_dot(t),
        lambda t: first.xi_ddot(t) + second.xi_ddot(t),
        f"{first.name}+{second.name}",
        first.closed_form and second.closed_form,
    )


def _simpson_integral(f: TimeFunction, t: float, step: float) -> float:
    if t == 0.0:
        return 0.0
    intervals = max(2, 2 * math.ceil(abs(t) / (2.0 * step)))
    grid = np.linspace(0.0, t, intervals + 1)
    return float(simpson([f(s) for s in grid], x=grid))


def phase_offset(motion: FrameMotion, t: float, step: float = DEFAULT_QUADRATURE_STEP) -> float:
    """c(t) = -½∫₀ᵗ ξ̇² dt by composite Simpson, with c(0) = 0."""
    return -0.5 * _simpson_integral(lambda s: motion.xi_dot(s) ** 2, t, step)


def phase_shift(
    motion: FrameMotion,
    x_tilde,
    t: float,
    units: UnitSystem = UnitSystem(),
    *,
    step: float = DEFAULT_QUADRATURE_STEP,
) -> np.ndarray:
    """ΔS = (m/ħ)(ξ̇ x̃ + c(t))."""
    x_tilde = np.asarray(x_tilde, dtype=float)
    return units.mass / units.hbar * (motion.xi_dot(t) * x_tilde + phase_offset(motion, t, step))


# ---------------------------------------------------------------------------
# States and potentials
# ---------------------------------------------------------------------------


def tilde_grid(grid: Grid1D, motion: FrameMotion, t: float) -> Grid1D:
    return Grid1D(grid.x_min + motion.xi(t), grid.dx, grid.n)


def _fourier_shift(amplitudes: np.ndarray, grid: Grid1D, offset: float) -> np.ndarray:
    """Band-limited ψ(x + offset) on the same grid points."""
    if offset == 0.0:
        return np.array(amplitudes)
    return np.fft.ifft(np.fft.fft(amplitudes) * np.exp(1j * grid.wavenumbers() * offset))


def transform_state(
    psi: WaveFunction,
    motion: FrameMotion,
    t: float,
    target: Optional[Grid1D] = None,
    *,
    step: float = DEFAULT_QUADRATURE_STEP,
) -> WaveFunction:
    """
    ψ̃(x̃) = ψ(x̃ - ξ(t)) e^{iΔS(x̃, t)}.

    Without `target` the tilde grid is psi's grid translated by ξ(t) and densities are carried
    over point by point. With `target` (same spacing and size) ψ is resampled spectrally.
    """
    if target is None:
        target = tilde_grid(psi.grid, motion, t)
        amplitudes = np.array(psi.amplitudes)
    else:
        if target.n != psi.grid.n or not math.isclose(target.dx, psi.grid.dx, rel_tol=1e-12):
            raise InvalidInputError("target grid must match the source spacing and size")
        offset = target.x_min - psi.grid.x_min - motion.xi(t)
        if not psi.periodic:
            _check_clipping(psi, offset)
        amplitudes = _fourier_shift(psi.amplitudes, psi.grid, offset)
    shift = phase_shift(motion, target.points, t, psi.units, step=step)
    return WaveFunction(target, amplitudes * np.exp(1j * shift), psi.boundary, psi.units, psi.t)


def _check_clipping(psi: WaveFunction, offset: float) -> None:
    grid = psi.grid
    # points of the source domain that land outside the tilde domain
    lo, hi = grid.x_min + offset - 0.5 * grid.dx, grid.x_max + offset + 0.5 * grid.dx
    outside = (grid.points < lo) | (grid.points > hi)
    clipped = float(np.sum(psi.density[outside]) * grid.dx)
    if clipped > CLIPPED_MASS_TOL:
        raise FrameClippingError(
            "transformed support does not fit the tilde domain",
            context={"clipped_mass": clipped, "offset": offset},
        )


def transformed_potential(
    potential: FieldLike,
    motion: FrameMotion,
    units: UnitSystem = UnitSystem(),
) -> Callable[[np.ndarray, float], np.ndarray]:
    """Ṽ(x̃, t) = V(x̃ - ξ(t), t) - m ξ̈(t) x̃."""

    def tilde(x_tilde: np.ndarray, t: float) -> np.ndarray:
        x_tilde = np.asarray(x_tilde, dtype=float)
        return sample_field(potential, x_tilde - motion.xi(t), t) - units.mass * motion.xi_ddot(t) * x_tilde

    return tilde


# ---------------------------------------------------------------------------
# Cross-frame verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SymmetryReport:
    motion: str
    times: np.ndarray
    density_residuals: np.ndarray
    phase_residuals: np.ndarray
    potentials_used: dict[str, str] = field(default_factory=dict)

    @property
    def max_density_residual(self) -> float:
        return float(np.max(self.density_residuals))

    @property
    def max_phase_residual(self) -> float:
        return float(np.max(self.phase_residuals))

    def to_dict(self) -> dict:
        return {
            "motion": self.motion,
            "times": self.times.tolist(),
            "density_residual": self.density_residuals.tolist(),
            "phase_residual": self.phase_residuals.tolist(),
            "potentials_used": self.potentials_used,
        }


def _wrapped(angle: np.ndarray) -> np.ndarray:
    return np.angle(np.exp(1j * angle))


def _check_walls(evolution: Evolution) -> None:
    """Split-step propagation wraps around the domain; a Dirichlet run must keep its walls empty."""
    for state in evolution:
        rho = state.density
        wall_mass = float((rho[:WALL_CELLS].sum() + rho[-WALL_CELLS:].sum()) * state.grid.dx)
        if wall_mass > WALL_MASS_TOL:
            raise BoundaryDensityError(
                "state reaches a Dirichlet wall during the frame comparison",
                context={"t": state.t, "wall_mass": wall_mass},
            )


def verify_symmetry(
    psi: WaveFunction,
    potential: FieldLike,
    motion: FrameMotion,
    *,
    dt: float,
    steps: int,
    checkpoint_every: int = 1,
    step: Optional[float] = None,
    potential_label: str = "V",
) -> SymmetryReport:
    """
    Evolve ψ under V and transform_state(ψ, motion, 0) under Ṽ with the split-step scheme and
    identical dt, then compare every checkpoint with the transformed original-frame state.
    On a Dirichlet grid both runs must keep their walls empty (BoundaryDensityError otherwise),
    which is where the periodic split-step and the walled evolution agree.

    density residual: max |ρ̃ - ρ| dx; phase residual: max |arg ψ̃ - arg ψ - ΔS| (mod 2π) where
    ρ ≥ 1e-8 max ρ.
    """
    quadrature = dt if step is None else step
    motion.check_smooth(dt * steps)
    psi_tilde = transform_state(psi, motion, psi.t, step=quadrature)
    v_tilde = transformed_potential(potential, motion, psi.units)

    with ThreadPoolExecutor(max_workers=2) as pool:
        original = pool.submit(evolve, psi, potential, dt, steps, checkpoint_every=checkpoint_every, scheme="split-step")
        moved = pool.submit(evolve, psi_tilde, v_tilde, dt, steps, checkpoint_every=checkpoint_every, scheme="split-step")
        original, moved = original.result(), moved.result()
    if not psi.periodic:
        _check_walls(original)
        _check_walls(moved)

    density_residuals, phase_residuals = [], []
    for state, observed in zip(original, moved):
        expected = transform_state(state, motion, state.t, target=observed.grid, step=quadrature)
        dx = observed.grid.dx
        density_residuals.append(float(np.max(np.abs(observed.density - expected.density)) * dx))
        on = expected.density >= PHASE_MASK_RATIO * expected.density.max()
        mismatch = _wrapped(np.angle(observed.amplitudes[on]) - np.angle(expected.amplitudes[on]))
        phase_residuals.append(float(np.max(np.abs(mismatch))))

    report = SymmetryReport(
        motion=motion.name,
        times=original.times,
        density_residuals=np.array(density_residuals),
        phase_residuals=np.array(phase_residuals),
        potentials_used={"original": potential_label, "tilde": f"{potential_label}(x~ - xi(t), t) - m*xi''(t)*x~"},
    )
    logger.info(
        "frame %s: density residual %.2e, phase residual %.2e over %d checkpoints",
        motion.name,
        report.max_density_residual,
        report.max_phase_residual,
        len(report.times),
    )
    return report


# ---------------------------------------------------------------------------
# Proper time
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProperTimeResidue:
    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return self.rhs - self.lhs


def proper_time_residue(
    motion: FrameMotion,
    c_light: float,
    duration: float,
    step: float = DEFAULT_QUADRATURE_STEP,
) -> ProperTimeResidue:
    """lhs = (1/2c²)∫₀ᵀ ξ̇² dt against rhs = T - ∫₀ᵀ (1 - ξ̇²/c²)^{1/2} dt."""
    if not c_light > 0 or not duration >= 0:
        raise InvalidInputError("need c > 0 and T >= 0", context={"c": c_light, "T": duration})
    samples = np.linspace(0.0, duration, max(2, 2 * math.ceil(duration / (2.0 * step))) + 1)
    beta = np.array([motion.xi_dot(s) for s in samples]) / c_light
    fastest = float(np.max(np.abs(beta)))
    if fastest >= 1.0:
        raise SuperluminalMotionError("frame moves at or above the speed of light", context={"max_beta": fastest})
    if fastest > NONRELATIVISTIC_LIMIT:
        logger.warning("max |xi'|/c = %.2f is outside the small-velocity regime", fastest)
    lhs = 0.5 * float(simpson(beta**2, x=samples))
    # T - ∫√(1-β²) written as ∫β²/(1+√(1-β²)) to avoid cancellation
    rhs = float(simpson(beta**2 / (1.0 + np.sqrt(1.0 - beta**2)), x=samples))
    return ProperTimeResidue(lhs, rhs)
