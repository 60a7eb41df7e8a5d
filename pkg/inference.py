"""
Maximum-entropy updating engine.
Relative entropy, a damped-Newton dual solver for expectation constraints, classification of
constraint systems, and Bayes' theorem recovered as the data-constraint special case.
Entropies use natural logarithms (k = 1).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import linprog, minimize_scalar
from scipy.special import logsumexp

from errors import (
    AbsoluteContinuityError,
    InvalidDistributionError,
    InvalidInputError,
    NumericalError,
    NumericalOverflowError,
    SupportMismatchError,
    ZeroEvidenceError,
)

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Solver constants
# ---------------------------------------------------------------------------
DISCRETE_NORMALIZATION_TOL = 1e-12
GRID_NORMALIZATION_TOL = 1e-10
RESIDUAL_TOL = 1e-10
MAX_NEWTON_ITERATIONS = 200
MAX_BACKTRACKS = 60
DIVERGENT_MULTIPLIER_NORM = 1e8
RANK_DEFICIENCY_RATIO = 1e-10
# A line-search step may raise the dual by at most this much (relative): evaluation round-off
DUAL_ROUNDOFF_TOL = 1e-14
# Entropy variation below which a free centre is considered undetermined.
FLAT_ENTROPY_TOL = 1e-8
# Relative slack when comparing a target with the extreme values of its constraint function.
BOUNDARY_RELATIVE_TOL = 1e-12

ArrayLike = Union[Sequence[float], np.ndarray]


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Distribution:
    """
    Probability weights over a discrete index set or a uniform 1-D grid.

    Discrete: `weights` are probabilities and `dx` is None.
    Grid: `weights` are densities (1/length) at `points` with spacing `dx`.
    """

    weights: np.ndarray
    points: np.ndarray
    dx: Optional[float] = None

    def __post_init__(self) -> None:
        weights = np.array(self.weights, dtype=float)
        points = np.array(self.points, dtype=float)
        if weights.ndim != 1 or points.shape != weights.shape:
            raise InvalidDistributionError(
                "weights and points must be 1-D arrays of equal length",
                context={"weights": weights.shape, "points": points.shape},
            )
        if weights.size == 0:
            raise InvalidDistributionError("distribution needs at least one support point")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise InvalidDistributionError("weights must be finite and nonnegative")
        if self.dx is not None and not self.dx > 0:
            raise InvalidDistributionError("grid spacing must be positive", context={"dx": self.dx})
        tol = GRID_NORMALIZATION_TOL if self.dx is not None else DISCRETE_NORMALIZATION_TOL
        total = float(weights.sum() * (self.dx or 1.0))
        if abs(total - 1.0) > tol:
            raise InvalidDistributionError("distribution is not normalized", context={"total": total})
        weights.setflags(write=False)
        points.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "points", points)

    # ----- constructors -----

    @classmethod
    def discrete(cls, weights: ArrayLike, points: Optional[ArrayLike] = None) -> "Distribution":
        """Normalize nonnegative weights into a discrete distribution."""
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if not total > 0:
            raise InvalidDistributionError("weights must have positive total mass")
        pts = np.arange(w.size, dtype=float) if points is None else points
        return cls(w / total, pts)

    @classmethod
    def uniform(cls, n: int, points: Optional[ArrayLike] = None) -> "Distribution":
        return cls.discrete(np.ones(n), points)

    @classmethod
    def grid(cls, density: ArrayLike, x_min: float, dx: float) -> "Distribution":
        """Normalize a nonnegative density sampled at x_min + i*dx (midpoint quadrature)."""
        rho = np.asarray(density, dtype=float)
        mass = rho.sum() * dx
        if not mass > 0:
            raise InvalidDistributionError("density must have positive total mass")
        return cls(rho / mass, x_min + dx * np.arange(rho.size), dx)

    @classmethod
    def uniform_grid(cls, x_min: float, dx: float, n: int) -> "Distribution":
        return cls.grid(np.ones(n), x_min, dx)

    # ----- views -----

    @property
    def is_grid(self) -> bool:
        return self.dx is not None

    @property
    def size(self) -> int:
        return int(self.weights.size)

    @property
    def probabilities(self) -> np.ndarray:
        """Probability mass per support point (density * dx on grids)."""
        return self.weights * self.dx if self.is_grid else self.weights

    def same_support(self, other: "Distribution") -> bool:
        if self.size != other.size or self.is_grid != other.is_grid:
            return False
        if self.is_grid and not math.isclose(self.dx, other.dx, rel_tol=1e-12):
            return False
        return bool(np.allclose(self.points, other.points, rtol=1e-12, atol=1e-12))

    def with_probabilities(self, probabilities: ArrayLike) -> "Distribution":
        """Same support, new probability masses (converted back to densities on grids)."""
        p = np.asarray(probabilities, dtype=float)
        p = p / p.sum()
        return Distribution(p / self.dx if self.is_grid else p, self.points, self.dx)


def _require_same_support(p: Distribution, q: Distribution) -> None:
    if not p.same_support(q):
        raise SupportMismatchError(
            "distributions are defined on different supports",
            context={"p_size": p.size, "q_size": q.size},
        )


def relative_entropy(p: Distribution, q: Distribution) -> float:
    """S[p, q] = -sum p log(p/q); never positive, zero only for p == q. 0 log 0 := 0."""
    _require_same_support(p, q)
    pp, qq = p.probabilities, q.probabilities
    active = pp > 0
    if np.any(qq[active] <= 0):
        raise AbsoluteContinuityError(
            "p assigns probability where the prior q assigns none",
            context={"violations": int(np.count_nonzero(qq[active] <= 0))},
        )
    return float(-np.sum(pp[active] * np.log(pp[active] / qq[active])))


def shannon_entropy(p: Distribution) -> float:
    """Shannon entropy; differential entropy -∫ρ log ρ dx on grids."""
    w = p.weights
    active = w > 0
    mass = p.probabilities[active]
    return float(-np.sum(mass * np.log(w[active])))


# ---------------------------------------------------------------------------
# Marginalization and expectations
# ---------------------------------------------------------------------------


def _sample(dist: Distribution, f: Union[Callable[[np.ndarray], np.ndarray], ArrayLike]) -> np.ndarray:
    values = f(dist.points) if callable(f) else f
    values = np.broadcast_to(np.asarray(values, dtype=float), dist.points.shape)
    return values


def expectation(dist: Distribution, f: Union[Callable[[np.ndarray], np.ndarray], ArrayLike]) -> float:
    """<f> = sum_i p_i f(x_i)."""
    return float(np.sum(dist.probabilities * _sample(dist, f)))


def variance(
    dist: Distribution,
    f: Union[Callable[[np.ndarray], np.ndarray], ArrayLike, None] = None,
) -> float:
    """Var f = <(f - <f>)^2>; f defaults to the support coordinate."""
    values = dist.points if f is None else _sample(dist, f)
    mean = float(np.sum(dist.probabilities * values))
    return float(np.sum(dist.probabilities * (values - mean) ** 2))


@dataclass(frozen=True, eq=False)
class JointDistribution:
    """Joint prior q(θ, d) over a θ index set and a data index set."""

    weights: np.ndarray
    theta_points: np.ndarray
    data_points: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=float)
        theta = np.array(self.theta_points, dtype=float)
        data = np.array(self.data_points, dtype=float)
        if w.shape != (theta.size, data.size):
            raise InvalidDistributionError(
                "joint weights must have shape (n_theta, n_data)",
                context={"shape": w.shape},
            )
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InvalidDistributionError("joint weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > DISCRETE_NORMALIZATION_TOL:
            raise InvalidDistributionError("joint distribution is not normalized", context={"total": w.sum()})
        for arr in (w, theta, data):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "theta_points", theta)
        object.__setattr__(self, "data_points", data)

    @classmethod
    def from_model(
        cls,
        prior: Distribution,
        likelihood: ArrayLike,
        data_points: Optional[ArrayLike] = None,
    ) -> "JointDistribution":
        """q(θ, d) = q(θ) q(d|θ); likelihood rows are indexed by θ."""
        lik = np.asarray(likelihood, dtype=float)
        if lik.ndim != 2 or lik.shape[0] != prior.size:
            raise SupportMismatchError("likelihood rows must match the prior support")
        joint = prior.probabilities[:, None] * lik
        joint = joint / joint.sum()
        data = np.arange(lik.shape[1], dtype=float) if data_points is None else data_points
        return cls(joint, prior.points, data)

    def data_index(self, observed: float) -> int:
        hits = np.flatnonzero(np.isclose(self.data_points, observed, rtol=0.0, atol=1e-12))
        if hits.size == 0:
            raise InvalidInputError("observed value is not in the data support", context={"observed": observed})
        return int(hits[0])

    def flatten(self) -> Distribution:
        return Distribution(self.weights.ravel(), np.arange(self.weights.size, dtype=float))

    def marginal(self, keep: str = "theta") -> Distribution:
        return marginalize(self, keep)

    def conditional(self, observed: float) -> Distribution:
        return bayes_update(self, observed)


def marginalize(joint: JointDistribution, keep: str = "theta") -> Distribution:
    """Sum out one variable of a joint distribution; keep is 'theta' or 'data'."""
    if keep == "theta":
        return Distribution(joint.weights.sum(axis=1), joint.theta_points)
    if keep == "data":
        return Distribution(joint.weights.sum(axis=0), joint.data_points)
    raise InvalidInputError("keep must be 'theta' or 'data'", context={"keep": keep})


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Constraint:
    """<f(x)> = target. With free_centre the function is read as f(x - c) with c left open."""

    function: Callable[[np.ndarray], np.ndarray]
    target: float
    name: str = ""
    free_centre: bool = False

    def sample(self, points: np.ndarray, centre: float = 0.0) -> np.ndarray:
        x = points - centre if self.free_centre else points
        values = np.broadcast_to(np.asarray(self.function(x), dtype=float), points.shape)
        if not np.all(np.isfinite(values)):
            raise InvalidInputError(
                "constraint function is not finite on the support",
                context={"constraint": self.name or repr(self.function)},
            )
        return values


@dataclass(frozen=True)
class ConstraintSet:
    """Expectation constraints; normalization is always implied."""

    constraints: tuple[Constraint, ...] = ()

    @classmethod
    def of(cls, *constraints: Constraint) -> "ConstraintSet":
        return cls(tuple(constraints))

    def __len__(self) -> int:
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    @property
    def targets(self) -> np.ndarray:
        return np.array([c.target for c in self.constraints], dtype=float)

    @property
    def has_free_centre(self) -> bool:
        return any(c.free_centre for c in self.constraints)

    def matrix(self, points: np.ndarray, centre: float = 0.0) -> np.ndarray:
        if not self.constraints:
            return np.zeros((0, points.size))
        return np.vstack([c.sample(points, centre) for c in self.constraints])

    def names(self) -> list[str]:
        return [c.name or f"f{r}" for r, c in enumerate(self.constraints)]


def _as_constraint_set(constraints: Union[ConstraintSet, Iterable[Constraint]]) -> ConstraintSet:
    if isinstance(constraints, ConstraintSet):
        return constraints
    return ConstraintSet(tuple(constraints))


class Classification(str, Enum):
    WELL = "well"
    FULLY = "fully"
    OVER = "over"
    UNDER = "under"


@dataclass(frozen=True, eq=False)
class MaxEntSolution:
    classification: Classification
    posterior: Optional[Distribution]
    multipliers: np.ndarray
    log_partition: Optional[float]
    achieved_entropy: Optional[float]
    diagnostic: str = ""
    iterations: int = 0
    dual_history: tuple[float, ...] = ()
    centre: Optional[float] = None

    @property
    def feasible(self) -> bool:
        return self.classification is not Classification.OVER


@dataclass
class _FixedCentreResult:
    solution: MaxEntSolution
    rank_deficient: bool = False


# ---------------------------------------------------------------------------
# Maximum entropy
# ---------------------------------------------------------------------------


def _boundary_tol(values: np.ndarray) -> float:
    return BOUNDARY_RELATIVE_TOL * max(1.0, float(np.max(np.abs(values))) if values.size else 1.0)


def _overconstrained(k: int, reason: str, centre: Optional[float] = None) -> _FixedCentreResult:
    logger.info("overconstrained: %s", reason)
    return _FixedCentreResult(
        MaxEntSolution(
            classification=Classification.OVER,
            posterior=None,
            multipliers=np.full(k, np.nan),
            log_partition=None,
            achieved_entropy=None,
            diagnostic=reason,
            centre=centre,
        )
    )


def _saturate(
    f: np.ndarray,
    targets: np.ndarray,
    names: list[str],
) -> tuple[Optional[np.ndarray], np.ndarray, np.ndarray, str]:
    """
    Restrict the support for targets sitting on an extreme value of their function.
    Returns (active mask or None when infeasible, saturated flags, multipliers, reason).
    """
    k, n = f.shape
    active = np.ones(n, dtype=bool)
    saturated = np.zeros(k, dtype=bool)
    multipliers = np.zeros(k)
    changed = True
    while changed:
        changed = False
        for r in range(k):
            if saturated[r]:
                continue
            values = f[r, active]
            lo, hi = float(values.min()), float(values.max())
            tol = _boundary_tol(f[r])
            target = targets[r]
            if target < lo - tol or target > hi + tol:
                return None, saturated, multipliers, (
                    f"{names[r]}: target {target:.6g} outside attainable range [{lo:.6g}, {hi:.6g}]"
                )
            if hi - lo <= tol:
                saturated[r] = True
                changed = True
            elif abs(target - lo) <= tol:
                active &= f[r] <= lo + tol
                saturated[r] = True
                multipliers[r] = math.inf
                changed = True
            elif abs(target - hi) <= tol:
                active &= f[r] >= hi - tol
                saturated[r] = True
                multipliers[r] = -math.inf
                changed = True
        if not active.any():
            return None, saturated, multipliers, "extreme-value constraints leave an empty support"
    return active, saturated, multipliers, ""


def _linear_feasible(f: np.ndarray, targets: np.ndarray) -> bool:
    """Certificate: is there p >= 0 with sum p = 1 and f p = targets?"""
    n = f.shape[1]
    a_eq = np.vstack([np.ones((1, n)), f])
    b_eq = np.concatenate([[1.0], targets])
    result = linprog(np.zeros(n), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    return result.status != 2


def _solve_fixed_centre(prior: Distribution, cs: ConstraintSet, centre: float = 0.0) -> _FixedCentreResult:
    k = len(cs)
    names = cs.names()
    targets = cs.targets
    probs = prior.probabilities
    support = probs > 0
    f_full = cs.matrix(prior.points, centre)
    f = f_full[:, support]
    q = probs[support]

    active, saturated, multipliers, reason = _saturate(f, targets, names)
    if active is None:
        return _overconstrained(k, reason, centre)

    free = ~saturated
    f_a = f[np.ix_(free, active)]
    q_a = q[active]
    logq_a = np.log(q_a)
    targets_a = targets[free]
    n_active = int(active.sum())

    if n_active > 1 and f_a.shape[0] and not _linear_feasible(f_a, targets_a):
        return _overconstrained(k, "no distribution satisfies the constraints (linear feasibility certificate)", centre)

    system = np.vstack([np.ones((1, n_active)), f_a])
    fully = n_active == 1 or np.linalg.matrix_rank(system) >= n_active

    lam = np.zeros(f_a.shape[0])
    history: list[float] = []
    iterations = 0
    rank_deficient = False

    def dual(lmb: np.ndarray) -> tuple[float, np.ndarray]:
        a = logq_a - lmb @ f_a
        log_z = float(logsumexp(a))
        return log_z + float(lmb @ targets_a), a - log_z

    point_solution = None
    if fully and f_a.shape[0]:
        point_solution = np.linalg.lstsq(system, np.concatenate([[1.0], targets_a]), rcond=None)[0]

    if f_a.shape[0] == 0:
        p_active = q_a / q_a.sum()
        log_z = float(np.log(q_a.sum()))
    elif point_solution is not None and not np.all(point_solution > 0):
        # the single feasible point sits on the simplex boundary: no finite multipliers
        p_active = np.clip(point_solution, 0.0, None)
        p_active = p_active / p_active.sum()
        lam = np.full(f_a.shape[0], np.nan)
        log_z = math.nan
    else:
        value, log_p = dual(lam)
        if not np.isfinite(value):
            raise NumericalOverflowError("dual objective is not finite at the starting point")
        history.append(value)
        converged = False
        stagnated = False
        for iterations in range(1, MAX_NEWTON_ITERATIONS + 1):
            p = np.exp(log_p)
            mean = f_a @ p
            grad = targets_a - mean
            residual = float(np.max(np.abs(grad)))
            logger.debug("newton iteration %d: residual %.3e dual %.15g", iterations, residual, value)
            if residual <= RESIDUAL_TOL:
                converged = True
                break
            centered = f_a - mean[:, None]
            hessian = (centered * p) @ centered.T
            eig = np.linalg.eigvalsh(hessian)
            rank_deficient = bool(eig[0] < RANK_DEFICIENCY_RATIO * eig[-1])
            if rank_deficient:
                step = -np.linalg.lstsq(hessian, grad, rcond=None)[0]
            else:
                step = -np.linalg.solve(hessian, grad)
            t = 1.0
            accepted = False
            for _ in range(MAX_BACKTRACKS):
                candidate = lam + t * step
                cand_value, cand_log_p = dual(candidate)
                if np.isfinite(cand_value) and cand_value <= value + DUAL_ROUNDOFF_TOL * (1.0 + abs(value)):
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                stagnated = True
                break
            lam, value, log_p = candidate, cand_value, cand_log_p
            history.append(value)
        if not converged:
            p = np.exp(log_p)
            residual = float(np.max(np.abs(targets_a - f_a @ p)))
            if stagnated or np.linalg.norm(lam) > DIVERGENT_MULTIPLIER_NORM:
                return _overconstrained(
                    k,
                    f"dual diverges: residual {residual:.3e} with |lambda| = {np.linalg.norm(lam):.3e}",
                    centre,
                )
            raise NumericalError(
                "maximum-entropy solver did not converge",
                context={"iterations": iterations, "residual": residual},
            )
        centered = f_a - (f_a @ np.exp(log_p))[:, None]
        hessian = (centered * np.exp(log_p)) @ centered.T
        eig = np.linalg.eigvalsh(hessian)
        rank_deficient = bool(eig[0] < RANK_DEFICIENCY_RATIO * eig[-1])
        p_active = np.exp(log_p)
        log_z = float(logsumexp(logq_a - lam @ f_a))

    multipliers = multipliers.copy()
    multipliers[free] = lam

    probabilities = np.zeros(prior.size)
    support_idx = np.flatnonzero(support)[active]
    probabilities[support_idx] = p_active
    posterior = prior.with_probabilities(probabilities)
    entropy = relative_entropy(posterior, prior)

    if fully:
        classification = Classification.FULLY
        diagnostic = "feasible set is a single point"
    elif rank_deficient:
        classification = Classification.UNDER
        diagnostic = "dual Hessian is rank-deficient: the maximizer is not unique"
    else:
        classification = Classification.WELL
        diagnostic = "unique interior maximizer"
    if saturated.any() and not fully:
        diagnostic += f"; {int(saturated.sum())} constraint(s) pinned to an extreme value"

    solution = MaxEntSolution(
        classification=classification,
        posterior=posterior,
        multipliers=multipliers,
        log_partition=None if saturated.any() or math.isnan(log_z) else log_z,
        achieved_entropy=entropy,
        diagnostic=diagnostic,
        iterations=iterations,
        dual_history=tuple(history),
        centre=centre if cs.has_free_centre else None,
    )
    return _FixedCentreResult(solution, rank_deficient)


def _maximize_over_centre(prior: Distribution, cs: ConstraintSet) -> MaxEntSolution:
    """Free-centre constraints: treat the centre as one more dual coordinate."""
    pts = prior.points[prior.probabilities > 0]
    lo, hi = float(pts.min()), float(pts.max())
    centre = expectation(prior, lambda x: x)
    shift = (hi - lo) / 8.0
    if prior.is_grid:
        shift = max(1, round(shift / prior.dx)) * prior.dx

    def entropy_at(c: float) -> float:
        result = _solve_fixed_centre(prior, cs, c).solution
        return result.achieved_entropy if result.feasible else -math.inf

    base = _solve_fixed_centre(prior, cs, centre)
    if not base.solution.feasible:
        return base.solution
    s0 = base.solution.achieved_entropy
    s_plus, s_minus = entropy_at(centre + shift), entropy_at(centre - shift)
    spread = max(abs(s_plus - s0), abs(s_minus - s0))
    logger.debug("free centre check: entropy spread %.3e over shift %.3g", spread, shift)
    if spread <= FLAT_ENTROPY_TOL * (1.0 + abs(s0)):
        sol = base.solution
        return MaxEntSolution(
            classification=Classification.UNDER,
            posterior=sol.posterior,
            multipliers=sol.multipliers,
            log_partition=sol.log_partition,
            achieved_entropy=sol.achieved_entropy,
            diagnostic="every centre attains the same entropy; reporting the prior mean",
            iterations=sol.iterations,
            dual_history=sol.dual_history,
            centre=centre,
        )
    best = minimize_scalar(lambda c: -entropy_at(c), bounds=(lo, hi), method="bounded")
    return _solve_fixed_centre(prior, cs, float(best.x)).solution


def maximize_entropy(
    prior: Distribution,
    constraints: Union[ConstraintSet, Iterable[Constraint]],
) -> MaxEntSolution:
    """
    Posterior p_i = q_i exp(-sum_r λ_r f_r(x_i)) / Z maximizing S[p, q] under the constraints.

    Multipliers come from damped Newton on the convex dual log Z(λ) + λ·F, started at λ = 0
    with backtracking halving. Overconstrained problems are returned (no posterior), not raised.
    """
    cs = _as_constraint_set(constraints)
    if cs.has_free_centre:
        solution = _maximize_over_centre(prior, cs)
    else:
        solution = _solve_fixed_centre(prior, cs).solution
    logger.debug("maximize_entropy: %s (%s)", solution.classification.value, solution.diagnostic)
    return solution


def classify_constraints(
    prior: Distribution,
    constraints: Union[ConstraintSet, Iterable[Constraint]],
) -> Classification:
    return maximize_entropy(prior, constraints).classification


# ---------------------------------------------------------------------------
# Bayes' theorem and likelihoods
# ---------------------------------------------------------------------------


def bayes_update(joint: JointDistribution, observed: float) -> Distribution:
    """q(θ|D) = q(θ) q(D|θ) / q(D)."""
    j = joint.data_index(observed)
    column = joint.weights[:, j]
    evidence = float(column.sum())
    if evidence <= 0:
        raise ZeroEvidenceError("observed value has zero prior evidence", context={"observed": observed})
    return Distribution(column / evidence, joint.theta_points)


def bayes_update_via_maxent(joint: JointDistribution, observed: float) -> Distribution:
    """Same posterior obtained by maximizing entropy on the joint with p(d) = δ(d - D)."""
    j_obs = joint.data_index(observed)
    n_data = joint.data_points.size
    flat = joint.flatten()

    def indicator(j: int) -> Callable[[np.ndarray], np.ndarray]:
        return lambda idx: (idx.astype(int) % n_data == j).astype(float)

    cs = ConstraintSet(
        tuple(
            Constraint(indicator(j), 1.0 if j == j_obs else 0.0, name=f"p(d{j})")
            for j in range(n_data)
        )
    )
    solution = maximize_entropy(flat, cs)
    if not solution.feasible:
        raise ZeroEvidenceError("observed value has zero prior evidence", context={"observed": observed})
    posterior_joint = solution.posterior.probabilities.reshape(joint.weights.shape)
    return JointDistribution(posterior_joint, joint.theta_points, joint.data_points).marginal("theta")


def compose_likelihood(
    outcome_model: ArrayLike,
    data_model: ArrayLike,
    dx: Optional[float] = None,
    data_dx: Optional[float] = None,
    tol: float = 1e-8,
) -> np.ndarray:
    """
    q(D|θ) = sum_x q(x|θ) q(D|x) (times dx on a grid).

    outcome_model has shape (n_theta, n_x); data_model has shape (n_x, n_data).
    """
    outcome = np.asarray(outcome_model, dtype=float)
    data = np.asarray(data_model, dtype=float)
    if outcome.ndim != 2 or data.ndim != 2 or outcome.shape[1] != data.shape[0]:
        raise SupportMismatchError(
            "outcome and data models do not share the outcome support",
            context={"outcome": outcome.shape, "data": data.shape},
        )
    if np.any(outcome < 0) or np.any(data < 0):
        raise InvalidInputError("likelihood kernels must be nonnegative")
    if np.max(np.abs(outcome.sum(axis=1) * (dx or 1.0) - 1.0)) > tol:
        raise InvalidInputError("outcome model rows are not normalized over x")
    if np.max(np.abs(data.sum(axis=1) * (data_dx or 1.0) - 1.0)) > tol:
        raise InvalidInputError("data model rows are not normalized over D")
    return outcome @ data * (dx or 1.0)


def least_squares_log_likelihood(data: ArrayLike, model_values: ArrayLike, sigma: float) -> float:
    """log q(D|θ) for independent Gaussian data errors around precise outcomes m_i(θ)."""
    d = np.asarray(data, dtype=float)
    m = np.asarray(model_values, dtype=float)
    n = d.size
    return float(-np.sum((d - m) ** 2) / (2.0 * sigma**2) - 0.5 * n * np.log(2.0 * np.pi * sigma**2))


# ---------------------------------------------------------------------------
# Canonical ensemble
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CanonicalEnsemble:
    distribution: Distribution
    beta: float
    log_partition: float
    free_energy: Optional[float]
    solution: MaxEntSolution = field(repr=False)


def canonical_ensemble(energies: ArrayLike, mean_energy: float) -> CanonicalEnsemble:
    """p_i = exp(-β E_i) / Z from a uniform prior over levels and a mean-energy constraint."""
    levels = np.asarray(energies, dtype=float)
    prior = Distribution.uniform(levels.size, levels)
    solution = maximize_entropy(prior, [Constraint(lambda e: e, mean_energy, name="energy")])
    if not solution.feasible:
        raise InvalidInputError(
            "mean energy is outside the attainable range",
            context={"mean_energy": mean_energy, "diagnostic": solution.diagnostic},
        )
    beta = float(solution.multipliers[0])
    if not np.isfinite(beta) or solution.log_partition is None:
        raise InvalidInputError("mean energy pins the ensemble to an extreme level; β is infinite")
    log_z = solution.log_partition + math.log(levels.size)
    free_energy = None if beta == 0.0 else -log_z / beta
    return CanonicalEnsemble(solution.posterior, beta, log_z, free_energy, solution)
