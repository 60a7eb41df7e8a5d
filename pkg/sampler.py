"""
Stochastic trajectories of the entropic transition probability.

Each particle takes Euler-Maruyama steps x' = x + b dt + sqrt(ħ dt / m) ξ with the drift
b = v - u read from checkpointed wave-function fields. Ensembles are compared against
|ψ|² on grid cells; a centre-of-mass variant shows the classical limit.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from errors import SamplerConfigError
from wavefield import Evolution, Grid1D, HydroFields, WaveFunction, decompose

logger = logging.getLogger(__name__)

# Trajectories per RNG stream. Fixed so the ensemble depends only on (seed, n_traj).
BLOCK_SIZE = 1024
# Particle positions per chunk in centre-of-mass ensembles.
COM_CHUNK_POSITIONS = 1 << 20
MAX_SUBSTEPS = 10
TIME_TOL = 1e-9


def block_generator(seed: int, block: int) -> np.random.Generator:
    """Counter-based stream for one block of trajectories."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    dt: float
    steps: int
    interpolation: Literal["linear"] = "linear"
    boundary_policy: Literal["flag-and-freeze"] = "flag-and-freeze"
    record_times: Optional[tuple[float, ...]] = None
    max_escape_fraction: float = 0.01

    def __post_init__(self) -> None:
        if not self.dt > 0 or self.steps < 1:
            raise SamplerConfigError("sampler needs dt > 0 and at least one step", context={"dt": self.dt, "steps": self.steps})
        if self.interpolation != "linear":
            raise SamplerConfigError("only linear drift interpolation is supported")
        if self.boundary_policy != "flag-and-freeze":
            raise SamplerConfigError("only the flag-and-freeze boundary policy is supported")

    @classmethod
    def matching(
        cls,
        evolution: Evolution,
        substeps: int = 1,
        record_times: Optional[Sequence[float]] = None,
    ) -> "SamplerConfig":
        """Sampler steps that divide every checkpoint interval of `evolution` into `substeps` parts."""
        if len(evolution) < 2:
            raise SamplerConfigError("the field trajectory needs at least two checkpoints")
        spacing = float(np.diff(evolution.times)[0])
        dt = spacing / substeps
        steps = int(round((evolution.times[-1] - evolution.times[0]) / dt))
        return cls(dt=dt, steps=steps, record_times=None if record_times is None else tuple(record_times))


@dataclass(frozen=True)
class _Schedule:
    field_index: np.ndarray  # checkpoint used by each step
    record_steps: dict[int, int]  # completed step count -> record slot
    record_times: np.ndarray


def _schedule(evolution: Evolution, config: SamplerConfig) -> _Schedule:
    times = evolution.times
    if len(times) < 2:
        raise SamplerConfigError("the field trajectory needs at least two checkpoints")
    for spacing in np.diff(times):
        ratio = spacing / config.dt
        if abs(ratio - round(ratio)) > TIME_TOL * max(1.0, ratio) or round(ratio) < 1:
            raise SamplerConfigError(
                "sampler dt must divide every checkpoint interval",
                context={"dt": config.dt, "spacing": float(spacing)},
            )
        if round(ratio) > MAX_SUBSTEPS:
            raise SamplerConfigError(
                "checkpoint spacing exceeds 10 sampler steps",
                context={"dt": config.dt, "spacing": float(spacing)},
            )
    t0 = times[0]
    if t0 + config.steps * config.dt > times[-1] + TIME_TOL:
        raise SamplerConfigError("sampler runs past the last field checkpoint")

    midpoints = t0 + (np.arange(config.steps) + 0.5) * config.dt
    field_index = np.abs(midpoints[:, None] - times[None, :]).argmin(axis=1)

    wanted = times if config.record_times is None else np.asarray(config.record_times, dtype=float)
    record_steps: dict[int, int] = {}
    recorded = []
    for t in wanted:
        count = int(round((t - t0) / config.dt))
        if count < 0 or count > config.steps or abs(t0 + count * config.dt - t) > TIME_TOL * max(1.0, abs(t)):
            raise SamplerConfigError("record time is not reached by the sampler", context={"t": float(t)})
        if count not in record_steps:
            record_steps[count] = len(recorded)
            recorded.append(t0 + count * config.dt)
    return _Schedule(field_index, record_steps, np.array(recorded))


# ---------------------------------------------------------------------------
# Single step
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _DriftTable:
    """Drift samples b = v - u with NaN replaced by 0, plus where they may be used."""

    drift: np.ndarray
    valid: np.ndarray
    grid: Grid1D
    periodic: bool
    hbar: float
    mass: float

    @classmethod
    def from_fields(cls, fields: HydroFields) -> "_DriftTable":
        valid = fields.velocity_mask
        return cls(
            drift=np.where(valid, fields.b, 0.0),
            valid=valid,
            grid=fields.grid,
            periodic=fields.boundary == "periodic",
            hbar=fields.units.hbar,
            mass=fields.units.mass,
        )

    def interpolate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Linear interpolation of b; returns (b, ok). Cells touching an invalid node give b = 0."""
        n = self.grid.n
        s = (x - self.grid.x_min) / self.grid.dx
        cell = np.floor(s).astype(np.int64)
        w = s - cell
        if self.periodic:
            left = cell % n
            right = (cell + 1) % n
            ok = self.valid[left] & self.valid[right]
        else:
            inside = (cell >= 0) & (cell < n - 1)
            left = np.clip(cell, 0, n - 2)
            right = left + 1
            ok = inside & self.valid[left] & self.valid[right]
        b = (1.0 - w) * self.drift[left] + w * self.drift[right]
        return np.where(ok, b, 0.0), ok


def _advance(
    x: np.ndarray,
    table: _DriftTable,
    dt: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    b, ok = table.interpolate(x)
    noise = rng.standard_normal(x.shape)
    return x + b * dt + math.sqrt(table.hbar * dt / table.mass) * noise, ok


def sample_step(x: np.ndarray, fields: HydroFields, dt: float, rng: np.random.Generator) -> np.ndarray:
    """One transition x -> x + b(x) dt + Δw with Var Δw = ħ dt / m. Outside the field mask b = 0."""
    positions, _ = _advance(np.asarray(x, dtype=float), _DriftTable.from_fields(fields), dt, rng)
    return positions


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


def initial_positions(psi: WaveFunction, uniforms: np.ndarray) -> np.ndarray:
    """Inverse CDF of |ψ|² with the density constant across each grid cell."""
    grid = psi.grid
    mass = psi.density * grid.dx
    cdf = np.cumsum(mass)
    cdf = cdf / cdf[-1]
    cell = np.minimum(np.searchsorted(cdf, uniforms, side="right"), grid.n - 1)
    lower = np.where(cell > 0, cdf[np.maximum(cell - 1, 0)], 0.0)
    width = np.where(mass[cell] > 0, cdf[cell] - lower, 1.0)
    fraction = np.clip((uniforms - lower) / width, 0.0, 1.0)
    return grid.points[cell] + (fraction - 0.5) * grid.dx


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """Positions per record time; escaped trajectories are frozen at their last interior position."""

    seed: int
    n_traj: int
    times: np.ndarray
    positions: np.ndarray  # (n_records, n_traj)
    escaped: np.ndarray  # (n_records, n_traj)
    grid: Grid1D
    fluctuation_only_steps: int
    max_escape_fraction: float = 0.01

    @property
    def escape_fraction(self) -> float:
        return float(self.escaped[-1].mean())

    @property
    def valid(self) -> bool:
        return self.escape_fraction <= self.max_escape_fraction

    def histogram(self, index: int) -> np.ndarray:
        """Fraction of all trajectories per grid cell (escaped ones excluded)."""
        grid = self.grid
        live = ~self.escaped[index]
        cells = np.rint((self.positions[index, live] - grid.x_min) / grid.dx).astype(np.int64)
        cells = np.clip(cells, 0, grid.n - 1)
        return np.bincount(cells, minlength=grid.n) / self.n_traj

    def moments(self, index: int) -> tuple[float, float]:
        live = ~self.escaped[index]
        x = self.positions[index, live]
        return float(x.mean()), float(x.var())

    def rows(self):
        """(traj_id, t, x, escaped) in trajectory-major order."""
        for traj in range(self.n_traj):
            for k, t in enumerate(self.times):
                yield traj, float(t), float(self.positions[k, traj]), bool(self.escaped[k, traj])


def _domain(grid: Grid1D) -> tuple[float, float]:
    return grid.x_min - 0.5 * grid.dx, grid.x_max + 0.5 * grid.dx


def _run_block(
    block: int,
    count: int,
    seed: int,
    psi0: WaveFunction,
    tables: list[_DriftTable],
    schedule: _Schedule,
    config: SamplerConfig,
) -> tuple[np.ndarray, np.ndarray, int]:
    rng = block_generator(seed, block)
    grid = psi0.grid
    lo, hi = _domain(grid)
    x = initial_positions(psi0, rng.random(count))
    escaped = np.zeros(count, dtype=bool)
    positions = np.empty((len(schedule.record_times), count))
    flags = np.zeros_like(positions, dtype=bool)
    fluctuation_only = 0
    if 0 in schedule.record_steps:
        positions[schedule.record_steps[0]] = x
    for step in range(config.steps):
        table = tables[schedule.field_index[step]]
        proposal, ok = _advance(x, table, config.dt, rng)
        live = ~escaped
        fluctuation_only += int(np.count_nonzero(live & ~ok))
        if psi0.periodic:
            proposal = lo + np.mod(proposal - lo, grid.length)
        else:
            escaped = escaped | (live & ((proposal < lo) | (proposal >= hi)))
        x = np.where(escaped, x, proposal)
        slot = schedule.record_steps.get(step + 1)
        if slot is not None:
            positions[slot] = x
            flags[slot] = escaped
    return positions, flags, fluctuation_only


def run_ensemble(
    evolution: Evolution,
    config: SamplerConfig,
    seed: int,
    n_traj: int,
    *,
    workers: int = 1,
) -> TrajectoryEnsemble:
    """
    Sample n_traj trajectories starting from |ψ(·, t0)|².

    Fields are refreshed from the checkpoint nearest to each step's midpoint. Blocks of
    BLOCK_SIZE trajectories own independent streams, so the output is the same for any
    number of workers.
    """
    if n_traj < 1:
        raise SamplerConfigError("ensemble needs at least one trajectory")
    schedule = _schedule(evolution, config)
    tables = [_DriftTable.from_fields(decompose(state)) for state in evolution.states]
    psi0 = evolution.states[0]
    sizes = [min(BLOCK_SIZE, n_traj - start) for start in range(0, n_traj, BLOCK_SIZE)]

    def job(block: int):
        return _run_block(block, sizes[block], seed, psi0, tables, schedule, config)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(len(sizes))))
    else:
        results = [job(block) for block in range(len(sizes))]

    positions = np.concatenate([r[0] for r in results], axis=1)
    escaped = np.concatenate([r[1] for r in results], axis=1)
    fluctuation_only = sum(r[2] for r in results)
    ensemble = TrajectoryEnsemble(
        seed=seed,
        n_traj=n_traj,
        times=schedule.record_times,
        positions=positions,
        escaped=escaped,
        grid=psi0.grid,
        fluctuation_only_steps=fluctuation_only,
        max_escape_fraction=config.max_escape_fraction,
    )
    logger.info(
        "sampled %d trajectories x %d steps: %d fluctuation-only steps, escape fraction %.4f",
        n_traj,
        config.steps,
        fluctuation_only,
        ensemble.escape_fraction,
    )
    if not ensemble.valid:
        logger.warning("escape fraction %.4f exceeds %.2f; ensemble flagged invalid", ensemble.escape_fraction, config.max_escape_fraction)
    return ensemble


@dataclass(frozen=True, eq=False)
class L1Report:
    times: np.ndarray
    distances: np.ndarray
    thresholds: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(self.distances <= self.thresholds))

    @property
    def max_distance(self) -> float:
        return float(np.max(self.distances))


def l1_threshold(bins: int, n: int) -> float:
    return max(0.02, 3.0 * math.sqrt(bins / n))


def histogram_l1(ensemble: TrajectoryEnsemble, evolution: Evolution) -> L1Report:
    """
    Σ_cells |histogram - |ψ|² dx| per record time. The threshold counts the cells that
    carry either samples or reference mass above 1/n.
    """
    distances, thresholds = [], []
    for k, t in enumerate(ensemble.times):
        reference = evolution.at_time(t).density * ensemble.grid.dx
        sampled = ensemble.histogram(k)
        distances.append(float(np.sum(np.abs(sampled - reference))))
        occupied = int(np.count_nonzero((sampled > 0) | (reference >= 1.0 / ensemble.n_traj)))
        thresholds.append(l1_threshold(max(occupied, 1), ensemble.n_traj))
    return L1Report(ensemble.times, np.array(distances), np.array(thresholds))


# ---------------------------------------------------------------------------
# Classical limit
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ComEnsemble:
    n_particles: int
    times: np.ndarray
    centres: np.ndarray  # (n_records, n_members)
    step_variance: float
    expected_step_variance: float
    escape_fraction: float

    @property
    def relative_variance_error(self) -> float:
        return abs(self.step_variance / self.expected_step_variance - 1.0)


def com_ensemble(
    evolution: Evolution,
    n_particles: int,
    config: SamplerConfig,
    seed: int,
    n_members: int,
) -> ComEnsemble:
    """
    Centre of mass R = (1/N) Σ x_n of N independent identical particles, n_members times.

    Var(ΔR) per step is pooled over steps and members; it should equal (ħ dt / m) / N.
    """
    if n_particles < 1 or n_members < 2:
        raise SamplerConfigError("centre-of-mass ensemble needs N >= 1 and at least two members")
    schedule = _schedule(evolution, config)
    tables = [_DriftTable.from_fields(decompose(state)) for state in evolution.states]
    psi0 = evolution.states[0]
    lo, hi = _domain(psi0.grid)
    members_per_chunk = max(1, COM_CHUNK_POSITIONS // n_particles)

    centres = np.empty((len(schedule.record_times), n_members))
    increment_sums = np.zeros(config.steps)
    increment_squares = np.zeros(config.steps)
    escaped_members = 0
    for chunk, start in enumerate(range(0, n_members, members_per_chunk)):
        count = min(members_per_chunk, n_members - start)
        rng = block_generator(seed, chunk)
        x = initial_positions(psi0, rng.random(count * n_particles)).reshape(count, n_particles)
        escaped = np.zeros_like(x, dtype=bool)
        r = x.mean(axis=1)
        if 0 in schedule.record_steps:
            centres[schedule.record_steps[0], start : start + count] = r
        for step in range(config.steps):
            table = tables[schedule.field_index[step]]
            proposal, _ = _advance(x, table, config.dt, rng)
            if psi0.periodic:
                proposal = lo + np.mod(proposal - lo, psi0.grid.length)
            else:
                escaped |= (proposal < lo) | (proposal >= hi)
            x = np.where(escaped, x, proposal)
            r_next = x.mean(axis=1)
            delta = r_next - r
            increment_sums[step] += delta.sum()
            increment_squares[step] += (delta**2).sum()
            r = r_next
            slot = schedule.record_steps.get(step + 1)
            if slot is not None:
                centres[slot, start : start + count] = r
        escaped_members += int(np.count_nonzero(escaped.any(axis=1)))

    means = increment_sums / n_members
    variances = (increment_squares - n_members * means**2) / (n_members - 1)
    units = psi0.units
    result = ComEnsemble(
        n_particles=n_particles,
        times=schedule.record_times,
        centres=centres,
        step_variance=float(variances.mean()),
        expected_step_variance=units.hbar * config.dt / (units.mass * n_particles),
        escape_fraction=escaped_members / n_members,
    )
    logger.info(
        "centre of mass N=%d: Var(ΔR) %.4e vs expected %.4e",
        n_particles,
        result.step_variance,
        result.expected_step_variance,
    )
    return result


def com_step_variance_slope(results: Sequence[ComEnsemble]) -> float:
    """Least-squares slope of log Var(ΔR) against log N."""
    if len(results) < 2:
        raise SamplerConfigError("slope needs at least two particle counts")
    n = np.log([r.n_particles for r in results])
    v = np.log([r.step_variance for r in results])
    return float(np.polyfit(n, v, 1)[0])


@dataclass(frozen=True)
class HamiltonJacobiGap:
    quantum_term: float
    kinetic_term: float
    ratio: Optional[float]


def hamilton_jacobi_gap(psi: WaveFunction, mass: Optional[float] = None) -> HamiltonJacobiGap:
    """
    ρ-weighted |(ħ²/2M) ∂²ρ^{1/2}/ρ^{1/2}| over ρ-weighted (1/2M)(ħ∂φ)², with ħφ held fixed.

    ratio is None when the kinetic term vanishes.
    """
    fields = decompose(psi)
    units = psi.units
    heavy = units.mass if mass is None else mass
    on = fields.velocity_mask
    r = np.sqrt(fields.rho)
    laplacian = (np.roll(r, -1) - 2.0 * r + np.roll(r, 1)) / psi.grid.dx**2
    weights = fields.rho[on] / fields.rho[on].sum()
    quantum = units.hbar**2 / (2.0 * heavy) * np.abs(laplacian[on] / r[on])
    momentum = units.mass * fields.v[on]  # ħ∂φ
    kinetic = momentum**2 / (2.0 * heavy)
    q_mean = float(np.sum(weights * quantum))
    k_mean = float(np.sum(weights * kinetic))
    return HamiltonJacobiGap(q_mean, k_mean, None if k_mean == 0.0 else q_mean / k_mean)
