"""
Scenario orchestration: builds engine objects from validated config files, runs one CLI command,
writes CSV artifacts and summary.json, and evaluates the declared checks.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from errors import CheckFailedError, InvalidInputError, LabError, OverconstrainedError
from expressions import parse_expression
from frames import FrameMotion, proper_time_residue, verify_symmetry
from inference import (
    Classification,
    Constraint,
    Distribution,
    maximize_entropy,
    relative_entropy,
    shannon_entropy,
)
from measurement import (
    apply_device,
    born_probabilities,
    device_from_spec,
    expectation_value,
    filter_update,
    goodness_of_fit,
    pointer_distribution,
    pointer_expectation,
    simulate_outcomes,
)
from persistence import ArtifactWriter, ensemble_frame, outcomes_frame, series_frame
from sampler import (
    SamplerConfig,
    com_ensemble,
    com_step_variance_slope,
    hamilton_jacobi_gap,
    histogram_l1,
    run_ensemble,
)
from schemas import (
    CheckResult,
    CheckSpec,
    FrameSpec,
    MaxEntProblem,
    PotentialSpec,
    RunSummary,
    ScenarioConfig,
)
from settings import get_settings
from wavefield import (
    Evolution,
    FieldLike,
    GaugeField,
    Grid1D,
    UnitSystem,
    WaveFunction,
    default_time_step,
    energy_drift,
    evolve,
    evolve_gauged,
    fokker_planck_residual,
    gauge_transform,
    gaussian_packet,
    harmonic_eigenstates,
    harmonic_potential,
    momentum_stats,
    phase_equation_residual,
    plane_wave,
    power_balance,
)

logger = logging.getLogger(__name__)

SCENARIO_COMMANDS = ("evolve", "sample", "symmetry", "gauge-check", "measure", "classical-limit", "uncertainty")
COMMANDS = ("maxent",) + SCENARIO_COMMANDS
# Frame derivatives of expression motions use h = dt / FRAME_STEP_DIVISOR.
FRAME_STEP_DIVISOR = 10.0


# ---------------------------------------------------------------------------
# Config → engine objects
# ---------------------------------------------------------------------------


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    return ScenarioConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))


def load_problem(path: Union[str, Path]) -> MaxEntProblem:
    return MaxEntProblem.model_validate_json(Path(path).read_text(encoding="utf-8"))


def build_units(config: ScenarioConfig) -> UnitSystem:
    return UnitSystem(config.units.hbar, config.units.mass, config.units.osmotic_mass)


def build_grid(config: ScenarioConfig) -> Grid1D:
    return Grid1D.spanning(config.grid.x_min, config.grid.x_max, config.grid.dx)


@dataclass(frozen=True)
class BuiltPotential:
    field: FieldLike
    label: str
    time_dependent: bool = False


def build_potential(spec: PotentialSpec, units: UnitSystem) -> BuiltPotential:
    """Preset library plus free-form expressions in x and t."""
    if spec.expression is not None:
        expr = parse_expression(spec.expression)
        return BuiltPotential(expr.as_field(), str(expr), expr.depends_on("t"))
    preset = spec.preset or "free"
    if preset == "free":
        return BuiltPotential(None, "0")
    if preset == "harmonic":
        return BuiltPotential(harmonic_potential(spec.omega, units.mass), f"0.5*m*{spec.omega:g}^2*x^2")
    if preset == "linear":
        slope = spec.slope
        return BuiltPotential(lambda x, t: slope * x, f"{slope:g}*x")
    height, half, centre = spec.height, 0.5 * spec.width, spec.centre
    return BuiltPotential(
        lambda x, t: np.where(np.abs(x - centre) <= half, height, 0.0),
        f"barrier(height={height:g}, width={spec.width:g}, centre={centre:g})",
    )


def build_initial_state(config: ScenarioConfig, grid: Grid1D, units: UnitSystem) -> WaveFunction:
    spec = config.initial_state
    if spec.kind == "plane-wave":
        return plane_wave(grid, 2.0 * math.pi * spec.mode / grid.length, units)
    if spec.kind == "harmonic-eigenstate":
        _, states = harmonic_eigenstates(grid, spec.level + 1, spec.omega, units)
        return states[spec.level]
    return gaussian_packet(
        grid,
        spec.x0,
        spec.sigma0,
        spec.k0,
        chirp=spec.chirp,
        boundary=config.boundary,
        units=units,
    )


def build_motion(spec: FrameSpec, dt: float) -> FrameMotion:
    if spec.expression is not None:
        return FrameMotion.from_expression(spec.expression, step=dt / FRAME_STEP_DIVISOR)
    if spec.preset == "constant-velocity":
        return FrameMotion.constant_velocity(spec.v0)
    if spec.preset == "constant-acceleration":
        return FrameMotion.constant_acceleration(spec.g, spec.v0)
    return FrameMotion.rest()


def _require(stage: object, name: str, command: str) -> None:
    if stage is None:
        raise InvalidInputError(f"scenario has no '{name}' section, which '{command}' needs")


# ---------------------------------------------------------------------------
# Run plumbing
# ---------------------------------------------------------------------------


@dataclass
class RunContext:
    writer: ArtifactWriter
    seed: Optional[int]
    workers: int = 1


@dataclass
class StageResult:
    metrics: dict[str, Optional[float]] = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    # set when the information supplied admits no solution (exit code 2)
    infeasible: Optional[str] = None
    # checks implied by the command itself, evaluated with the declared ones
    implicit_checks: list[CheckSpec] = field(default_factory=list)


@dataclass(frozen=True)
class Prepared:
    config: ScenarioConfig
    units: UnitSystem
    grid: Grid1D
    psi0: WaveFunction
    potential: BuiltPotential
    dt: float


def prepare(config: ScenarioConfig) -> Prepared:
    units = build_units(config)
    grid = build_grid(config)
    psi0 = build_initial_state(config, grid, units)
    dt = config.evolution.dt or default_time_step(grid, units)
    return Prepared(config, units, grid, psi0, build_potential(config.potential, units), dt)


def run_evolution(prep: Prepared, psi: Optional[WaveFunction] = None) -> Evolution:
    spec = prep.config.evolution
    return evolve(
        prep.psi0 if psi is None else psi,
        prep.potential.field,
        prep.dt,
        spec.steps,
        checkpoint_every=spec.checkpoint_every,
        scheme=spec.scheme,
    )


def evaluate_checks(checks: list[CheckSpec], metrics: dict[str, Optional[float]]) -> list[CheckResult]:
    """Unknown metric names are configuration errors, not failed checks."""
    results = []
    for check in checks:
        if check.metric not in metrics:
            raise InvalidInputError(
                "check refers to an unknown metric",
                context={"metric": check.metric, "known": ", ".join(sorted(metrics))},
            )
        value = metrics[check.metric]
        kind = "max" if check.max is not None else "min"
        bound = check.max if kind == "max" else check.min
        if value is None or not math.isfinite(value):
            passed = False
        else:
            passed = value <= bound if kind == "max" else value >= bound
        results.append(CheckResult(name=check.metric, value=value, bound=bound, kind=kind, passed=passed))
    return results


# ---------------------------------------------------------------------------
# maxent
# ---------------------------------------------------------------------------


def run_maxent(problem: MaxEntProblem, ctx: RunContext) -> StageResult:
    support = problem.support
    if support.grid is not None:
        grid = Grid1D.spanning(support.grid.x_min, support.grid.x_max, support.grid.dx)
        if problem.prior is None:
            prior = Distribution.uniform_grid(grid.x_min, grid.dx, grid.n)
        else:
            density = np.asarray(problem.prior, dtype=float)
            if density.size != grid.n:
                raise InvalidInputError("prior length does not match the grid", context={"prior": density.size, "n": grid.n})
            prior = Distribution.grid(density, grid.x_min, grid.dx)
    else:
        points = np.asarray(support.points, dtype=float)
        if problem.prior is None:
            prior = Distribution.uniform(points.size, points)
        else:
            weights = np.asarray(problem.prior, dtype=float)
            if weights.size != points.size:
                raise InvalidInputError("prior length does not match the support", context={"prior": weights.size, "n": points.size})
            prior = Distribution.discrete(weights, points)

    constraints = []
    for r, spec in enumerate(problem.constraints):
        expr = parse_expression(spec.function, variables=("x",))
        constraints.append(Constraint(lambda x, e=expr: e.evaluate(x), spec.target, spec.name or f"f{r}", spec.free_centre))

    solution = maximize_entropy(prior, constraints)
    result = StageResult(
        metrics={
            "iterations": float(solution.iterations),
            "relative_entropy": None,
            "entropy": None,
            "log_partition": solution.log_partition,
        },
        details={
            "classification": solution.classification.value,
            "diagnostic": solution.diagnostic,
            "multipliers": np.asarray(solution.multipliers, dtype=float).tolist(),
            "centre": solution.centre,
        },
    )
    for r, value in enumerate(np.asarray(solution.multipliers, dtype=float)):
        result.metrics[f"multiplier_{r}"] = float(value)
    if solution.classification is Classification.OVER:
        result.infeasible = solution.diagnostic or "constraints are mutually inconsistent"
        return result

    posterior = solution.posterior
    result.metrics["relative_entropy"] = relative_entropy(posterior, prior)
    result.metrics["entropy"] = shannon_entropy(posterior)
    for r, c in enumerate(constraints):
        achieved = float(np.sum(posterior.probabilities * c.sample(posterior.points, solution.centre or 0.0)))
        result.metrics[f"residual_{r}"] = abs(achieved - c.target)
    ctx.writer.write_frame("posterior.csv", series_frame(x=posterior.points, weight=posterior.weights))
    return result


# ---------------------------------------------------------------------------
# Scenario commands
# ---------------------------------------------------------------------------


def run_evolve(prep: Prepared, ctx: RunContext) -> StageResult:
    evolution = run_evolution(prep)
    states = evolution.states
    x = prep.grid.points
    ctx.writer.write_snapshot("psi_final.csv", evolution.final)
    ctx.writer.write_frame(
        "density.csv",
        series_frame(
            t=np.repeat(evolution.times, x.size),
            x=np.tile(x, len(states)),
            rho=evolution.density_series().ravel(),
        ),
    )
    means = evolution.expectation_series(lambda s: s)
    second = evolution.expectation_series(lambda s: s**2)
    drift = energy_drift(evolution, prep.potential.field)
    ctx.writer.write_frame(
        "diagnostics.csv",
        series_frame(t=evolution.times, norm=[s.norm() for s in states], mean_x=means, var_x=second - means**2, energy_drift=drift),
    )

    metrics: dict[str, Optional[float]] = {
        "max_norm_drift": evolution.max_norm_drift,
        "final_time": float(evolution.times[-1]),
        "final_mean_x": float(means[-1]),
        "final_var_x": float(second[-1] - means[-1] ** 2),
        "max_density_change": float(np.max(np.abs(evolution.density_series() - states[0].density))),
        "max_energy_drift": None if prep.potential.time_dependent else float(np.max(np.abs(drift))),
        "power_mismatch": None,
        "fokker_planck_residual": None,
        "phase_residual": None,
    }
    if len(states) >= 3:
        metrics["fokker_planck_residual"] = fokker_planck_residual(evolution).max
        if prep.potential.time_dependent:
            metrics["power_mismatch"] = power_balance(evolution, prep.potential.field).max_relative_mismatch
    metrics["phase_residual"] = phase_equation_residual(evolution, prep.potential.field).max
    return StageResult(metrics)


def run_sample(prep: Prepared, ctx: RunContext) -> StageResult:
    spec = prep.config.sampler
    _require(spec, "sampler", "sample")
    evolution = run_evolution(prep)
    config = SamplerConfig.matching(evolution, spec.substeps, spec.record_times)
    config = replace(config, max_escape_fraction=spec.max_escape_fraction)
    ensemble = run_ensemble(evolution, config, ctx.seed, spec.n_traj, workers=ctx.workers)
    report = histogram_l1(ensemble, evolution)

    ctx.writer.write_frame("trajectories.csv", ensemble_frame(ensemble))
    ctx.writer.write_frame("l1.csv", series_frame(t=report.times, l1=report.distances, threshold=report.thresholds))

    metrics: dict[str, Optional[float]] = {
        "max_l1": report.max_distance,
        "l1_excess": float(np.max(report.distances - report.thresholds)),
        "escape_fraction": ensemble.escape_fraction,
        "fluctuation_only_steps": float(ensemble.fluctuation_only_steps),
        "max_norm_drift": evolution.max_norm_drift,
    }
    for k, t in enumerate(report.times):
        metrics[f"l1_at_{t:g}"] = float(report.distances[k])
        metrics[f"mean_x_at_{t:g}"], metrics[f"var_x_at_{t:g}"] = ensemble.moments(k)
    return StageResult(
        metrics,
        details={"valid": ensemble.valid, "l1_passed": report.passed},
        implicit_checks=[
            CheckSpec(metric="escape_fraction", max=spec.max_escape_fraction),
            CheckSpec(metric="l1_excess", max=0.0),
        ],
    )


def run_symmetry(prep: Prepared, ctx: RunContext) -> StageResult:
    spec = prep.config.frame
    _require(spec, "frame", "symmetry")
    evolution_spec = prep.config.evolution
    motion = build_motion(spec, prep.dt)
    report = verify_symmetry(
        prep.psi0,
        prep.potential.field,
        motion,
        dt=prep.dt,
        steps=evolution_spec.steps,
        checkpoint_every=evolution_spec.checkpoint_every,
        step=None if motion.closed_form else prep.dt / FRAME_STEP_DIVISOR,
        potential_label=prep.potential.label,
    )
    ctx.writer.write_frame(
        "symmetry.csv",
        series_frame(t=report.times, density_residual=report.density_residuals, phase_residual=report.phase_residuals),
    )
    metrics: dict[str, Optional[float]] = {
        "max_density_residual": report.max_density_residual,
        "max_phase_residual": report.max_phase_residual,
    }
    if spec.c_light is not None:
        residue = proper_time_residue(motion, spec.c_light, prep.dt * evolution_spec.steps)
        metrics.update(proper_time_lhs=residue.lhs, proper_time_rhs=residue.rhs, proper_time_gap=residue.gap)
    return StageResult(metrics, details=report.to_dict())


def _gauge_pair(prep: Prepared, gauge: GaugeField, text: str) -> tuple[np.ndarray, np.ndarray]:
    spec = prep.config.evolution
    expr = parse_expression(text)
    psi_prime, gauge_prime = gauge_transform(prep.psi0, gauge, expr.as_field())
    kwargs = dict(checkpoint_every=spec.checkpoint_every)
    original = evolve_gauged(prep.psi0, gauge, prep.dt, spec.steps, **kwargs)
    moved = evolve_gauged(psi_prime, gauge_prime, prep.dt, spec.steps, **kwargs)
    residual = np.max(np.abs(original.density_series() - moved.density_series()), axis=1) * prep.grid.dx
    return residual, original.times


def run_gauge_check(prep: Prepared, ctx: RunContext) -> StageResult:
    spec = prep.config.gauge
    _require(spec, "gauge", "gauge-check")
    vector = None if spec.vector_potential is None else parse_expression(spec.vector_potential).as_field()
    gauge = GaugeField(vector_potential=vector, scalar_potential=prep.potential.field, coupling=spec.coupling)

    with ThreadPoolExecutor(max_workers=max(1, ctx.workers)) as pool:
        pairs = list(pool.map(lambda text: _gauge_pair(prep, gauge, text), spec.gauge_functions))

    residuals = [residual for residual, _ in pairs]
    times = pairs[0][1]
    n_checkpoints = times.size
    ctx.writer.write_frame(
        "gauge.csv",
        series_frame(
            gauge_function=np.repeat(spec.gauge_functions, n_checkpoints),
            t=np.tile(times, len(residuals)),
            density_residual=np.concatenate(residuals),
        ),
    )
    metrics: dict[str, Optional[float]] = {"max_density_residual": float(max(r.max() for r in residuals))}
    for i, r in enumerate(residuals):
        metrics[f"density_residual_{i}"] = float(r.max())
    logger.info("gauge check: max density residual %.2e over %d gauge functions", metrics["max_density_residual"], len(residuals))
    return StageResult(metrics, details={"gauge_functions": list(spec.gauge_functions)})


def run_measure(prep: Prepared, ctx: RunContext) -> StageResult:
    spec = prep.config.measurement
    _require(spec, "measurement", "measure")
    device = device_from_spec(spec.device, prep.grid, prep.units)
    psi0 = prep.psi0
    metrics: dict[str, Optional[float]] = {}
    if spec.filter_outcome is not None:
        psi0 = filter_update(psi0, device, spec.filter_outcome)
        metrics["refilter_probability"] = float(born_probabilities(psi0, device).probabilities[spec.filter_outcome])
    final = run_evolution(prep, psi0).final

    overlap = born_probabilities(final, device)
    unitary = pointer_distribution(apply_device(final, device), device)
    report = simulate_outcomes(final, device, spec.shots, ctx.seed)
    ctx.writer.write_frame("outcomes.csv", outcomes_frame(report))
    ctx.writer.write_frame(
        "born.csv",
        series_frame(
            outcome=np.arange(device.size),
            pointer_x=device.pointer_positions,
            overlap_prob=overlap.probabilities,
            pointer_prob=unitary.probabilities,
        ),
    )
    metrics.update(
        born_route_gap=float(np.max(np.abs(overlap.probabilities - unitary.probabilities))),
        no_click_probability=overlap.no_click,
        chi_square_pvalue=goodness_of_fit(report) if spec.shots else None,
        expectation=expectation_value(final, device) if device.eigenvalues is not None else None,
        pointer_expectation=pointer_expectation(final, device),
    )
    if overlap.no_click > 1e-6:
        logger.warning("%.3g of the probability lies outside the device subspace (no-click)", overlap.no_click)
    return StageResult(metrics, details={"device": device.name, "probabilities": overlap.probabilities.tolist()})


def run_classical_limit(prep: Prepared, ctx: RunContext) -> StageResult:
    spec = prep.config.sampler
    _require(spec, "sampler", "classical-limit")
    evolution = run_evolution(prep)
    config = SamplerConfig.matching(evolution, spec.substeps)
    results = [com_ensemble(evolution, n, config, ctx.seed, spec.members) for n in spec.particle_counts]
    ctx.writer.write_frame(
        "com.csv",
        series_frame(
            n_particles=[r.n_particles for r in results],
            step_variance=[r.step_variance for r in results],
            expected_step_variance=[r.expected_step_variance for r in results],
            escape_fraction=[r.escape_fraction for r in results],
        ),
    )
    gap = hamilton_jacobi_gap(prep.psi0)
    metrics: dict[str, Optional[float]] = {
        "com_slope": com_step_variance_slope(results) if len(results) >= 2 else None,
        "max_relative_variance_error": max(r.relative_variance_error for r in results),
        "hj_gap_ratio": gap.ratio,
        "hj_quantum_term": gap.quantum_term,
        "hj_kinetic_term": gap.kinetic_term,
    }
    return StageResult(metrics)


def run_uncertainty(prep: Prepared, ctx: RunContext) -> StageResult:
    evolution = run_evolution(prep)
    stats = [momentum_stats(s) for s in evolution]
    hbar = prep.units.hbar
    var_x = np.array([s.var_x for s in stats])
    var_p = np.array([s.var_p for s in stats])
    var_mv = np.array([s.var_mv for s in stats])
    var_mu = np.array([s.var_mu for s in stats])
    product = np.sqrt(var_x * var_p)
    ctx.writer.write_frame(
        "uncertainty.csv",
        series_frame(t=evolution.times, var_x=var_x, var_p=var_p, var_mv=var_mv, var_mu=var_mu, product=product),
    )
    metrics: dict[str, Optional[float]] = {
        "max_decomposition_error": float(np.max(np.abs(var_p - var_mv - var_mu))),
        "min_uncertainty_margin": float(np.min(product - 0.5 * hbar)),
        "initial_uncertainty_product": float(product[0]),
    }
    return StageResult(metrics)


SCENARIO_HANDLERS: dict[str, Callable[[Prepared, RunContext], StageResult]] = {
    "evolve": run_evolve,
    "sample": run_sample,
    "symmetry": run_symmetry,
    "gauge-check": run_gauge_check,
    "measure": run_measure,
    "classical-limit": run_classical_limit,
    "uncertainty": run_uncertainty,
}

SEEDED_COMMANDS = {"sample", "measure", "classical-limit"}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def run_scenario(
    command: str,
    path: Union[str, Path],
    out_dir: Union[str, Path, None] = None,
    *,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
) -> RunSummary:
    """
    Run one command on a scenario (or MaxEnt problem) file and write its artifacts.

    Returns the summary with every check evaluated. Overconstrained MaxEnt problems raise
    OverconstrainedError after summary.json is written; module errors get the file path added
    to their context.
    """
    if command not in COMMANDS:
        raise InvalidInputError("unknown command", context={"command": command})
    settings = get_settings()
    path = Path(path)
    writer = ArtifactWriter(out_dir if out_dir is not None else settings.output_dir)
    try:
        if command == "maxent":
            problem = load_problem(path)
            name, checks = problem.name, problem.checks
            used_seed = None
            result = run_maxent(problem, RunContext(writer, None, workers or settings.workers))
        else:
            config = load_scenario(path)
            name, checks = config.name, config.checks
            used_seed = None
            if command in SEEDED_COMMANDS:
                used_seed = seed if seed is not None else config.seed if config.seed is not None else settings.default_seed
            ctx = RunContext(writer, used_seed, workers or settings.workers)
            logger.info("running %s on scenario '%s' (seed=%s)", command, name, used_seed)
            result = SCENARIO_HANDLERS[command](prepare(config), ctx)
    except LabError as exc:
        exc.context.setdefault("scenario", str(path))
        raise

    summary = RunSummary(
        command=command,
        scenario=name,
        seed=used_seed,
        metrics=result.metrics,
        details=result.details,
        checks=evaluate_checks(result.implicit_checks + list(checks), result.metrics),
    )
    summary = writer.write_summary(summary)
    if result.infeasible is not None:
        raise OverconstrainedError(result.infeasible, context={"scenario": str(path)})
    for check in summary.checks:
        level = logging.INFO if check.passed else logging.WARNING
        logger.log(level, "check %s %s %g: value %s -> %s", check.name, check.kind, check.bound, check.value, "pass" if check.passed else "FAIL")
    return summary


def require_passing(summary: RunSummary) -> None:
    """Raise CheckFailedError naming every check of the summary that did not pass."""
    failed = [c.name for c in summary.checks if not c.passed]
    if failed:
        raise CheckFailedError(
            f"{len(failed)} of {len(summary.checks)} checks failed",
            context={"scenario": summary.scenario, "checks": ", ".join(failed)},
        )
