"""
Config schemas, scenario orchestration and the command line.
"""

import json

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from errors import (
    EXIT_INFEASIBLE,
    EXIT_OK,
    EXIT_VALIDATION_FAILURE,
    CheckFailedError,
    InvalidInputError,
    OverconstrainedError,
)
from main import main
from persistence import load_snapshot
from scenario import build_potential, evaluate_checks, require_passing, run_scenario
from schemas import CheckSpec, DeviceSpec, PotentialSpec, RunSummary, ScenarioConfig
from wavefield import UnitSystem


def small_scenario(**overrides) -> dict:
    scenario = {
        "version": 1,
        "name": "small",
        "grid": {"x_min": -10.0, "x_max": 10.0, "dx": 0.1},
        "initial_state": {"kind": "gaussian", "x0": 0.0, "sigma0": 1.0},
        "evolution": {"dt": 0.01, "steps": 20, "checkpoint_every": 2},
    }
    scenario.update(overrides)
    return scenario


def write(tmp_path, name: str, payload: dict):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


TWO_STATE = {
    "version": 1,
    "name": "two-state",
    "support": {"points": [0.0, 1.0]},
    "constraints": [{"function": "x", "target": 0.3}],
}


class TestSchemas:
    def test_minimal_scenario(self):
        config = ScenarioConfig.model_validate(small_scenario())
        assert config.boundary == "dirichlet"
        assert config.potential.preset is None
        assert config.checks == []

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioConfig.model_validate(small_scenario(colour="blue"))
        with pytest.raises(ValidationError):
            ScenarioConfig.model_validate(small_scenario(evolution={"steps": 5, "dtt": 0.1}))

    def test_version_required(self):
        with pytest.raises(ValidationError):
            ScenarioConfig.model_validate(small_scenario(version=2))

    def test_packet_clearance(self):
        with pytest.raises(ValidationError):
            ScenarioConfig.model_validate(small_scenario(initial_state={"x0": 7.0, "sigma0": 1.0}))

    def test_plane_wave_needs_periodic_grid(self):
        with pytest.raises(ValidationError):
            ScenarioConfig.model_validate(small_scenario(initial_state={"kind": "plane-wave", "mode": 1}))

    def test_bad_potential_expression(self):
        with pytest.raises(ValidationError):
            ScenarioConfig.model_validate(small_scenario(potential={"expression": "0.5*x^"}))
        with pytest.raises(ValidationError):
            ScenarioConfig.model_validate(small_scenario(potential={"expression": "y"}))

    def test_frame_needs_one_source(self):
        with pytest.raises(ValidationError):
            ScenarioConfig.model_validate(small_scenario(frame={"v0": 1.0}))
        with pytest.raises(ValidationError):
            ScenarioConfig.model_validate(small_scenario(frame={"expression": "x*t"}))

    def test_check_needs_one_bound(self):
        with pytest.raises(ValidationError):
            CheckSpec(metric="a")
        with pytest.raises(ValidationError):
            CheckSpec(metric="a", max=1.0, min=0.0)

    def test_device_entry_counts(self):
        with pytest.raises(ValidationError):
            DeviceSpec(preset="harmonic", count=3, eigenvalues=[1.0, 2.0])
        with pytest.raises(ValidationError):
            DeviceSpec(preset="grid-delta")


class TestBuilders:
    def test_potential_presets(self):
        x = np.array([-1.0, 0.0, 0.4, 2.0])
        units = UnitSystem()
        assert build_potential(PotentialSpec(), units).field is None
        linear = build_potential(PotentialSpec(preset="linear", slope=-2.0), units)
        np.testing.assert_allclose(linear.field(x, 0.0), -2.0 * x)
        barrier = build_potential(PotentialSpec(preset="barrier", height=3.0, width=1.0), units)
        np.testing.assert_allclose(barrier.field(x, 0.0), [0.0, 3.0, 3.0, 0.0])
        harmonic = build_potential(PotentialSpec(preset="harmonic", omega=2.0), units)
        np.testing.assert_allclose(harmonic.field(x, 0.0), 2.0 * x**2)

    def test_expression_potential(self):
        static = build_potential(PotentialSpec(expression="0.5*x^2"), UnitSystem())
        assert not static.time_dependent
        driven = build_potential(PotentialSpec(expression="x*sin(t)"), UnitSystem())
        assert driven.time_dependent
        np.testing.assert_allclose(driven.field(np.array([2.0]), np.pi / 2), [2.0])


class TestChecks:
    def test_pass_and_fail(self):
        checks = [CheckSpec(metric="a", max=1.0), CheckSpec(metric="b", min=2.0), CheckSpec(metric="c", max=0.0)]
        results = evaluate_checks(checks, {"a": 0.5, "b": 1.0, "c": None})
        assert [r.passed for r in results] == [True, False, False]
        assert results[1].kind == "min"

    def test_unknown_metric(self):
        with pytest.raises(InvalidInputError):
            evaluate_checks([CheckSpec(metric="nope", max=1.0)], {"a": 0.0})

    def test_failed_checks_raise_with_their_names(self):
        checks = evaluate_checks([CheckSpec(metric="a", max=1.0), CheckSpec(metric="b", min=2.0)], {"a": 0.5, "b": 1.0})
        with pytest.raises(CheckFailedError) as info:
            require_passing(RunSummary(command="evolve", scenario="demo", checks=checks))
        assert info.value.exit_code == EXIT_VALIDATION_FAILURE
        assert info.value.context["checks"] == "b"
        require_passing(RunSummary(command="evolve", scenario="demo", checks=checks[:1]))


class TestMaxEnt:
    def test_two_state_canonical(self, tmp_path):
        problem = dict(TWO_STATE, checks=[{"metric": "residual_0", "max": 1e-10}])
        summary = run_scenario("maxent", write(tmp_path, "p.json", problem), tmp_path / "out")
        assert summary.passed
        posterior = pd.read_csv(tmp_path / "out" / "posterior.csv")
        np.testing.assert_allclose(posterior["weight"], [0.7, 0.3], atol=1e-10)
        assert summary.details["classification"] == "fully"
        assert summary.artifacts == ["posterior.csv"]
        assert (tmp_path / "out" / "summary.json").exists()

    def test_overconstrained(self, tmp_path):
        problem = dict(
            TWO_STATE,
            support={"points": [-1.0, 0.0, 1.0]},
            constraints=[{"function": "x^2", "target": 0.25}, {"function": "abs(x)", "target": 0.75}],
        )
        with pytest.raises(OverconstrainedError):
            run_scenario("maxent", write(tmp_path, "p.json", problem), tmp_path / "out")
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["details"]["classification"] == "over"


class TestScenarioCommands:
    def test_evolve(self, tmp_path):
        path = write(tmp_path, "s.json", small_scenario(checks=[{"metric": "max_norm_drift", "max": 1e-12}]))
        summary = run_scenario("evolve", path, tmp_path / "out")
        assert summary.passed
        assert summary.seed is None
        assert {"psi_final.csv", "psi_final.json", "density.csv", "diagnostics.csv"} <= set(summary.artifacts)
        final = load_snapshot(tmp_path / "out" / "psi_final.csv")
        assert final.t == pytest.approx(0.2)
        assert summary.metrics["final_var_x"] == pytest.approx(1.0 + 0.01, rel=1e-3)
        assert summary.metrics["max_energy_drift"] <= 1e-6

    def test_sample_is_deterministic(self, tmp_path):
        scenario = small_scenario(
            grid={"x_min": -16.0, "x_max": 16.0, "dx": 0.2},
            sampler={"n_traj": 2000},
            seed=5,
        )
        path = write(tmp_path, "s.json", scenario)
        first = run_scenario("sample", path, tmp_path / "a")
        second = run_scenario("sample", path, tmp_path / "b", workers=3)
        assert first.seed == 5
        a = (tmp_path / "a" / "trajectories.csv").read_bytes()
        assert a == (tmp_path / "b" / "trajectories.csv").read_bytes()
        frame = pd.read_csv(tmp_path / "a" / "trajectories.csv")
        assert len(frame) == 2000 * 11
        assert first.metrics["escape_fraction"] == 0.0
        # free spreading: Var x(t) = 1 + t²/4, 4-sigma bands for 2000 samples
        assert first.metrics["mean_x_at_0.2"] == pytest.approx(0.0, abs=0.1)
        assert first.metrics["var_x_at_0.2"] == pytest.approx(1.01, abs=0.13)
        assert first.metrics["var_x_at_0"] == pytest.approx(1.0, abs=0.13)
        assert [c.name for c in first.checks] == ["escape_fraction", "l1_excess"]

    def test_seed_override(self, tmp_path):
        scenario = small_scenario(grid={"x_min": -16.0, "x_max": 16.0, "dx": 0.2}, sampler={"n_traj": 100}, seed=5)
        summary = run_scenario("sample", write(tmp_path, "s.json", scenario), tmp_path / "out", seed=9)
        assert summary.seed == 9

    def test_symmetry(self, tmp_path):
        scenario = small_scenario(
            grid={"x_min": -20.0, "x_max": 20.0, "dx": 0.05},
            evolution={"dt": 1e-3, "steps": 200, "checkpoint_every": 50},
            frame={"preset": "constant-velocity", "v0": 1.0, "c_light": 10.0},
        )
        summary = run_scenario("symmetry", write(tmp_path, "s.json", scenario), tmp_path / "out")
        assert summary.metrics["max_density_residual"] <= 1e-6
        assert summary.metrics["max_phase_residual"] <= 1e-6
        assert summary.metrics["proper_time_gap"] > 0.0
        assert len(pd.read_csv(tmp_path / "out" / "symmetry.csv")) == 5

    def test_gauge_check(self, tmp_path):
        scenario = small_scenario(potential={"preset": "harmonic"}, gauge={})
        summary = run_scenario("gauge-check", write(tmp_path, "s.json", scenario), tmp_path / "out")
        assert summary.metrics["max_density_residual"] <= 1e-8
        assert summary.details["gauge_functions"] == ["1", "x", "x*t"]
        frame = pd.read_csv(tmp_path / "out" / "gauge.csv")
        assert len(frame) == 3 * 11
        for _, rows in frame.groupby("gauge_function", sort=False):
            np.testing.assert_allclose(rows["t"].to_numpy(), np.arange(11) * 0.02, atol=1e-12)

    def test_measure(self, tmp_path):
        scenario = small_scenario(
            grid={"x_min": -10.0, "x_max": 10.0, "dx": 0.05},
            initial_state={"x0": 0.5, "sigma0": 0.8},
            potential={"preset": "harmonic"},
            measurement={"device": {"preset": "harmonic", "count": 4}, "shots": 1000},
            seed=3,
        )
        summary = run_scenario("measure", write(tmp_path, "s.json", scenario), tmp_path / "out")
        assert summary.metrics["born_route_gap"] <= 1e-10
        assert summary.metrics["no_click_probability"] > 0.0
        outcomes = pd.read_csv(tmp_path / "out" / "outcomes.csv")
        assert outcomes["count"].sum() == 1000
        assert outcomes["outcome"].iloc[-1] == "no-click"

    def test_measure_after_filter(self, tmp_path):
        scenario = small_scenario(
            grid={"x_min": -10.0, "x_max": 10.0, "dx": 0.05},
            measurement={"device": {"preset": "harmonic", "count": 4}, "shots": 0, "filter_outcome": 2},
        )
        summary = run_scenario("measure", write(tmp_path, "s.json", scenario), tmp_path / "out")
        assert summary.metrics["refilter_probability"] == pytest.approx(1.0, abs=1e-12)
        assert summary.metrics["chi_square_pvalue"] is None

    def test_uncertainty(self, tmp_path):
        scenario = small_scenario(initial_state={"x0": 0.0, "sigma0": 1.0, "k0": 0.0})
        summary = run_scenario("uncertainty", write(tmp_path, "s.json", scenario), tmp_path / "out")
        assert summary.metrics["min_uncertainty_margin"] >= -1e-9
        assert summary.metrics["initial_uncertainty_product"] == pytest.approx(0.5, abs=1e-6)

    def test_classical_limit(self, tmp_path):
        scenario = small_scenario(sampler={"particle_counts": [1, 10], "members": 200}, seed=2)
        summary = run_scenario("classical-limit", write(tmp_path, "s.json", scenario), tmp_path / "out")
        assert summary.metrics["com_slope"] is not None
        assert summary.metrics["hj_gap_ratio"] is None
        assert len(pd.read_csv(tmp_path / "out" / "com.csv")) == 2

    def test_missing_section(self, tmp_path):
        path = write(tmp_path, "s.json", small_scenario())
        with pytest.raises(InvalidInputError) as info:
            run_scenario("sample", path, tmp_path / "out")
        assert info.value.context["scenario"] == str(path)


class TestCommandLine:
    def test_success(self, tmp_path):
        path = write(tmp_path, "p.json", TWO_STATE)
        assert main(["maxent", str(path), "--out", str(tmp_path / "out"), "--quiet"]) == EXIT_OK

    def test_overconstrained_exit_code(self, tmp_path):
        problem = dict(TWO_STATE, constraints=[{"function": "x", "target": 2.0}])
        path = write(tmp_path, "p.json", problem)
        assert main(["maxent", str(path), "--out", str(tmp_path / "out"), "--quiet"]) == EXIT_INFEASIBLE

    def test_unknown_key_exit_code(self, tmp_path):
        path = write(tmp_path, "s.json", small_scenario(extra_stage={}))
        assert main(["evolve", str(path), "--out", str(tmp_path / "out"), "--quiet"]) == EXIT_VALIDATION_FAILURE

    def test_failed_check_exit_code(self, tmp_path):
        path = write(tmp_path, "s.json", small_scenario(checks=[{"metric": "final_var_x", "max": 0.5}]))
        assert main(["evolve", str(path), "--out", str(tmp_path / "out"), "--quiet"]) == EXIT_VALIDATION_FAILURE

    def test_unknown_metric_exit_code(self, tmp_path):
        path = write(tmp_path, "s.json", small_scenario(checks=[{"metric": "speed", "max": 0.5}]))
        assert main(["evolve", str(path), "--out", str(tmp_path / "out"), "--quiet"]) == EXIT_VALIDATION_FAILURE

    def test_missing_file(self, tmp_path):
        assert main(["evolve", str(tmp_path / "nope.json"), "--out", str(tmp_path / "out"), "--quiet"]) == EXIT_VALIDATION_FAILURE
