"""
Pydantic v2 schemas for scenario files, MaxEnt problem files, device descriptions and run summaries.
Strict: unknown keys are rejected and every file carries `version: 1`.
"""

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from expressions import parse_expression

PACKET_CLEARANCE_SIGMAS = 6.0


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _check_expression(text: Optional[str], variables: tuple[str, ...] = ("x", "t")) -> Optional[str]:
    if text is not None:
        parse_expression(text, variables)
    return text


# ----- Shared building blocks -----


class UnitsSpec(StrictModel):
    """Physical constants of the run."""

    hbar: float = Field(1.0, gt=0, description="Reduced Planck constant ħ.")
    mass: float = Field(1.0, gt=0, description="Particle (current) mass m.")
    osmotic_mass: Optional[float] = Field(
        None,
        gt=0,
        description="Osmotic mass μ that scales the fluctuations. Defaults to the current mass.",
    )


class GridSpec(StrictModel):
    """Uniform 1-D grid; the last point is the largest x_min + k·dx not beyond x_max."""

    x_min: float = Field(..., description="Left-most grid point.")
    x_max: float = Field(..., description="Right-most grid point (inclusive up to rounding).")
    dx: float = Field(..., gt=0, description="Grid spacing.")

    @model_validator(mode="after")
    def _ordered(self) -> "GridSpec":
        if self.x_max - self.x_min < 2 * self.dx:
            raise ValueError("grid needs x_max - x_min >= 2*dx")
        return self


class InitialStateSpec(StrictModel):
    """Initial wave function."""

    kind: Literal["gaussian", "plane-wave", "harmonic-eigenstate"] = Field(
        "gaussian",
        description="'gaussian' packet, periodic 'plane-wave', or a discrete 'harmonic-eigenstate' of the grid Hamiltonian.",
    )
    x0: float = Field(0.0, description="Gaussian centre.")
    sigma0: float = Field(1.0, gt=0, description="Gaussian width σ0 (standard deviation of |ψ|²).")
    k0: float = Field(0.0, description="Gaussian mean wavenumber.")
    chirp: float = Field(0.0, description="Quadratic phase coefficient: ψ gains exp(i·chirp·(x-x0)²).")
    mode: int = Field(0, description="Plane-wave mode j; the wavenumber is 2πj/L.")
    level: int = Field(0, ge=0, description="Oscillator level n for 'harmonic-eigenstate'.")
    omega: float = Field(1.0, gt=0, description="Oscillator frequency for 'harmonic-eigenstate'.")


class PotentialSpec(StrictModel):
    """Scalar potential V(x, t): one preset or one expression in x and t."""

    preset: Optional[Literal["free", "harmonic", "linear", "barrier"]] = Field(
        None,
        description="Exact preset: 'free' (V=0), 'harmonic' (½mω²x²), 'linear' (slope·x), 'barrier' (height on |x-centre| ≤ width/2).",
    )
    expression: Optional[str] = Field(
        None,
        description="Expression in x and t, e.g. '0.5*x^2 + 0.1*sin(t)'. Mutually exclusive with preset.",
    )
    omega: float = Field(1.0, gt=0, description="Frequency of the harmonic preset.")
    slope: float = Field(0.0, description="Slope of the linear preset (a uniform force -slope).")
    height: float = Field(0.0, description="Height of the barrier preset.")
    width: float = Field(1.0, gt=0, description="Width of the barrier preset.")
    centre: float = Field(0.0, description="Centre of the barrier preset.")

    @field_validator("expression")
    @classmethod
    def _expression_ok(cls, text: Optional[str]) -> Optional[str]:
        return _check_expression(text)

    @model_validator(mode="after")
    def _one_source(self) -> "PotentialSpec":
        if self.preset is not None and self.expression is not None:
            raise ValueError("give either a potential preset or an expression, not both")
        return self


class EvolutionSpec(StrictModel):
    """Propagation schedule."""

    dt: Optional[float] = Field(None, gt=0, description="Time step. Defaults to 0.25·m·dx²/ħ.")
    steps: int = Field(..., ge=1, description="Number of time steps.")
    checkpoint_every: int = Field(1, ge=1, description="Store a checkpoint every this many steps (and at the end).")
    scheme: Literal["crank-nicolson", "split-step"] = Field(
        "crank-nicolson",
        description="Propagator. Crank-Nicolson by default; split-step is exactly Galilean covariant.",
    )


class GaugeSpec(StrictModel):
    """Electromagnetic background and the gauge functions tested by gauge-check."""

    vector_potential: Optional[str] = Field(None, description="Vector potential A(x, t) as an expression.")
    coupling: float = Field(1.0, description="Coupling β = e/ħc.")
    gauge_functions: list[str] = Field(
        default_factory=lambda: ["1", "x", "x*t"],
        min_length=1,
        description="Gauge functions f(x, t); each one gives a transformed evolution compared against the original.",
    )

    @field_validator("vector_potential")
    @classmethod
    def _vector_ok(cls, text: Optional[str]) -> Optional[str]:
        return _check_expression(text)

    @field_validator("gauge_functions")
    @classmethod
    def _functions_ok(cls, values: list[str]) -> list[str]:
        for text in values:
            parse_expression(text)
        return values


class SamplerSpec(StrictModel):
    """Trajectory ensemble driven by the evolution's checkpoints."""

    n_traj: int = Field(100_000, ge=1, description="Number of trajectories.")
    substeps: int = Field(1, ge=1, le=10, description="Sampler steps per checkpoint interval.")
    record_times: Optional[list[float]] = Field(
        None,
        description="Times at which positions are recorded and compared. Defaults to every checkpoint.",
    )
    max_escape_fraction: float = Field(0.01, ge=0, le=1, description="Escaped fraction above which the ensemble is invalid.")
    particle_counts: list[int] = Field(
        default_factory=lambda: [10, 100, 1000],
        min_length=1,
        description="Particle numbers N for the classical-limit centre-of-mass ensembles.",
    )
    members: int = Field(10_000, ge=2, description="Centre-of-mass ensemble size for each N.")


class FrameSpec(StrictModel):
    """Motion ξ(t) of the tilde frame."""

    preset: Optional[Literal["rest", "constant-velocity", "constant-acceleration"]] = Field(
        None,
        description="Closed-form motion preset.",
    )
    expression: Optional[str] = Field(
        None,
        description="ξ(t) as an expression in t; derivatives by 4th-order central differences with h = dt/10.",
    )
    v0: float = Field(0.0, description="Initial frame velocity for the presets.")
    g: float = Field(0.0, description="Frame acceleration for 'constant-acceleration'.")
    c_light: Optional[float] = Field(
        None,
        gt=0,
        description="Speed of light; when set the proper-time residue over the run is reported too.",
    )

    @field_validator("expression")
    @classmethod
    def _time_only(cls, text: Optional[str]) -> Optional[str]:
        return _check_expression(text, ("t",))

    @model_validator(mode="after")
    def _one_source(self) -> "FrameSpec":
        if (self.preset is None) == (self.expression is None):
            raise ValueError("frame needs exactly one of preset or expression")
        return self


class DeviceSpec(StrictModel):
    """A measurement device: an orthonormal family paired with pointer grid sites."""

    preset: Literal["harmonic", "plane-wave", "grid-delta"] = Field(
        ...,
        description="'harmonic' eigenstates, periodic 'plane-wave' modes, or 'grid-delta' position states.",
    )
    count: int = Field(8, ge=1, le=64, description="Number of harmonic eigenstates.")
    omega: float = Field(1.0, gt=0, description="Oscillator frequency for the harmonic preset.")
    modes: list[int] = Field(default_factory=list, description="Plane-wave mode numbers j (k = 2πj/L).")
    indices: list[int] = Field(default_factory=list, description="Grid indices of the delta states.")
    pointer_indices: Optional[list[int]] = Field(
        None,
        description="Pointer grid site for each basis state. Defaults to an even spread over the middle of the grid.",
    )
    eigenvalues: Optional[list[float]] = Field(
        None,
        description="Eigenvalue per basis state. Defaults to energies, ħk or positions depending on the preset.",
    )

    @model_validator(mode="after")
    def _members(self) -> "DeviceSpec":
        size = {"harmonic": self.count, "plane-wave": len(self.modes), "grid-delta": len(self.indices)}[self.preset]
        if size == 0 or size > 64:
            raise ValueError("device needs between 1 and 64 basis states")
        for name in ("pointer_indices", "eigenvalues"):
            values = getattr(self, name)
            if values is not None and len(values) != size:
                raise ValueError(f"{name} must have one entry per basis state ({size})")
        return self


class MeasurementSpec(StrictModel):
    """Measurement stage of a scenario, applied to the final evolved state."""

    device: DeviceSpec = Field(..., description="The measuring device.")
    shots: int = Field(10_000, ge=0, description="Monte-Carlo outcomes to draw.")
    filter_outcome: Optional[int] = Field(
        None,
        ge=0,
        description="When set, the initial state is filtered on this outcome before evolution and re-measured after.",
    )


class CheckSpec(StrictModel):
    """Declared pass/fail check on a named metric of the run summary."""

    metric: str = Field(..., description="Metric name as it appears in summary.json.")
    max: Optional[float] = Field(None, description="Upper bound (inclusive).")
    min: Optional[float] = Field(None, description="Lower bound (inclusive).")

    @model_validator(mode="after")
    def _one_bound(self) -> "CheckSpec":
        if (self.max is None) == (self.min is None):
            raise ValueError("a check needs exactly one of 'max' or 'min'")
        return self


# ----- Scenario -----


class ScenarioConfig(StrictModel):
    """One scenario file. Each CLI command reads the stages it needs."""

    version: Literal[1] = Field(..., description="Schema version. Must be 1.")
    name: str = Field(..., min_length=1, description="Scenario name, echoed in summary.json.")
    units: UnitsSpec = Field(default_factory=UnitsSpec, description="Physical constants.")
    grid: GridSpec = Field(..., description="Spatial grid.")
    boundary: Literal["dirichlet", "periodic"] = Field("dirichlet", description="Boundary condition.")
    initial_state: InitialStateSpec = Field(default_factory=InitialStateSpec, description="Initial wave function.")
    potential: PotentialSpec = Field(default_factory=PotentialSpec, description="Scalar potential.")
    evolution: EvolutionSpec = Field(..., description="Time stepping and checkpoints.")
    gauge: Optional[GaugeSpec] = Field(None, description="Gauge background; required by gauge-check.")
    sampler: Optional[SamplerSpec] = Field(None, description="Trajectory sampler; required by sample and classical-limit.")
    frame: Optional[FrameSpec] = Field(None, description="Frame motion; required by symmetry.")
    measurement: Optional[MeasurementSpec] = Field(None, description="Measurement stage; required by measure.")
    seed: Optional[int] = Field(None, ge=0, description="Random seed. --seed overrides it.")
    checks: list[CheckSpec] = Field(default_factory=list, description="Declared checks on summary metrics.")

    @model_validator(mode="after")
    def _consistent(self) -> "ScenarioConfig":
        state = self.initial_state
        if state.kind == "gaussian" and self.boundary == "dirichlet":
            clearance = PACKET_CLEARANCE_SIGMAS * state.sigma0
            if state.x0 - clearance < self.grid.x_min or state.x0 + clearance > self.grid.x_max:
                raise ValueError("gaussian packet must sit at least 6 widths from the walls")
        if state.kind == "plane-wave" and self.boundary != "periodic":
            raise ValueError("plane-wave initial states need a periodic boundary")
        if state.kind == "harmonic-eigenstate" and self.boundary != "dirichlet":
            raise ValueError("harmonic eigenstates are computed with Dirichlet walls")
        return self


# ----- MaxEnt problem -----


class SupportSpec(StrictModel):
    """Discrete points, or a uniform grid of densities."""

    points: Optional[list[float]] = Field(None, min_length=1, description="Discrete support points x_i.")
    grid: Optional[GridSpec] = Field(None, description="Uniform grid; the prior is then a density.")

    @model_validator(mode="after")
    def _one_kind(self) -> "SupportSpec":
        if (self.points is None) == (self.grid is None):
            raise ValueError("support needs exactly one of 'points' or 'grid'")
        return self


class ConstraintSpec(StrictModel):
    """Expectation constraint <f(x)> = target."""

    function: str = Field(..., description="f(x) as an expression in x.")
    target: float = Field(..., description="Required expectation value.")
    name: str = Field("", description="Label used in reports.")
    free_centre: bool = Field(False, description="Read f as f(x - c) with the centre c left free.")

    @field_validator("function")
    @classmethod
    def _x_only(cls, text: str) -> str:
        return _check_expression(text, ("x",))


class MaxEntProblem(StrictModel):
    """Prior, support and constraints for one maximum-entropy update."""

    version: Literal[1] = Field(..., description="Schema version. Must be 1.")
    name: str = Field(..., min_length=1, description="Problem name, echoed in summary.json.")
    support: SupportSpec = Field(..., description="Support of the distributions.")
    prior: Optional[list[float]] = Field(
        None,
        description="Prior weights (or density values on a grid). Defaults to uniform; normalized on load.",
    )
    constraints: list[ConstraintSpec] = Field(default_factory=list, description="Expectation constraints.")
    checks: list[CheckSpec] = Field(default_factory=list, description="Declared checks on summary metrics.")


# ----- Run summary -----


class CheckResult(BaseModel):
    name: str = Field(..., description="Metric name.")
    value: Optional[float] = Field(None, description="Metric value; null when the metric is undefined for this run.")
    bound: float = Field(..., description="Declared bound.")
    kind: Literal["max", "min"] = Field(..., description="Whether the bound is an upper or a lower bound.")
    passed: bool = Field(..., description="True when the value respects the bound.")


class RunSummary(BaseModel):
    """Contents of summary.json."""

    command: str = Field(..., description="CLI command that produced the run.")
    scenario: str = Field(..., description="Scenario or problem name.")
    seed: Optional[int] = Field(None, description="Seed actually used (null for deterministic commands).")
    metrics: dict[str, Optional[float]] = Field(default_factory=dict, description="Scalar results of the run.")
    details: dict = Field(default_factory=dict, description="Non-scalar results (per-checkpoint series, classifications).")
    checks: list[CheckResult] = Field(default_factory=list, description="Outcome of every declared check.")
    artifacts: list[str] = Field(default_factory=list, description="Files written by the run, relative to the output directory.")

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


# ----- Snapshot sidecar -----


class SnapshotGrid(StrictModel):
    x_min: float = Field(..., description="First grid point.")
    dx: float = Field(..., gt=0, description="Grid spacing.")
    n: int = Field(..., ge=8, description="Number of grid points.")


class SnapshotSidecar(StrictModel):
    """JSON written next to a wave-function CSV."""

    version: Literal[1] = Field(1, description="Sidecar format version.")
    grid: SnapshotGrid = Field(..., description="Grid the amplitudes live on.")
    units: UnitsSpec = Field(default_factory=UnitsSpec, description="Physical constants of the state.")
    t: float = Field(0.0, description="Time of the snapshot.")
    boundary: Literal["dirichlet", "periodic"] = Field("dirichlet", description="Boundary condition.")
