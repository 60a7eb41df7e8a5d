"""
Run artifacts on disk: wave-function snapshots (CSV + JSON sidecar), trajectory and outcome tables,
and summary.json. All writes of one run go through a single ArtifactWriter.
"""

import logging
import threading
from pathlib import Path
from typing import Any, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from errors import NormalizationError, SnapshotFormatError
from measurement import OutcomeReport
from sampler import TrajectoryEnsemble
from schemas import RunSummary, SnapshotGrid, SnapshotSidecar, UnitsSpec
from wavefield import Grid1D, UnitSystem, WaveFunction

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
SNAPSHOT_COLUMNS = ["x", "re", "im"]
# x column may differ from x_min + i*dx by this many grid spacings
GRID_MATCH_TOL = 1e-9


# ----- Snapshots -----


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def snapshot_frame(psi: WaveFunction) -> pd.DataFrame:
    return pd.DataFrame({"x": psi.grid.points, "re": psi.amplitudes.real, "im": psi.amplitudes.imag})


def snapshot_sidecar(psi: WaveFunction) -> SnapshotSidecar:
    units = psi.units
    return SnapshotSidecar(
        grid=SnapshotGrid(x_min=psi.grid.x_min, dx=psi.grid.dx, n=psi.grid.n),
        units=UnitsSpec(hbar=units.hbar, mass=units.mass, osmotic_mass=units.osmotic_mass),
        t=psi.t,
        boundary=psi.boundary,
    )


def save_snapshot(psi: WaveFunction, path: Union[str, Path]) -> tuple[Path, Path]:
    """Write x,re,im at 17 significant digits plus the sidecar; returns both paths."""
    path = Path(path)
    snapshot_frame(psi).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    meta = sidecar_path(path)
    meta.write_text(snapshot_sidecar(psi).model_dump_json(indent=2), encoding="utf-8")
    return path, meta


def load_snapshot(path: Union[str, Path]) -> WaveFunction:
    """Read a snapshot back; the grid must match the sidecar and the state must be normalized."""
    path = Path(path)
    meta = sidecar_path(path)
    try:
        sidecar = SnapshotSidecar.model_validate_json(meta.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise SnapshotFormatError("snapshot sidecar is missing", context={"path": str(meta)}) from exc
    except ValidationError as exc:
        raise SnapshotFormatError("snapshot sidecar is malformed", context={"path": str(meta), "errors": exc.error_count()}) from exc

    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (FileNotFoundError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise SnapshotFormatError("snapshot CSV cannot be read", context={"path": str(path)}) from exc
    if list(frame.columns) != SNAPSHOT_COLUMNS:
        raise SnapshotFormatError("snapshot CSV needs columns x,re,im", context={"columns": list(frame.columns)})
    try:
        values = frame.to_numpy(dtype=float)
    except ValueError as exc:
        raise SnapshotFormatError("snapshot CSV has non-numeric entries", context={"path": str(path)}) from exc
    if not np.all(np.isfinite(values)):
        raise SnapshotFormatError("snapshot CSV has non-finite entries", context={"path": str(path)})

    grid = Grid1D(sidecar.grid.x_min, sidecar.grid.dx, sidecar.grid.n)
    if len(frame) != grid.n:
        raise SnapshotFormatError("row count does not match the sidecar grid", context={"rows": len(frame), "n": grid.n})
    if np.max(np.abs(values[:, 0] - grid.points)) > GRID_MATCH_TOL * grid.dx:
        raise SnapshotFormatError("x column does not match the sidecar grid", context={"path": str(path)})

    units = UnitSystem(sidecar.units.hbar, sidecar.units.mass, sidecar.units.osmotic_mass)
    try:
        return WaveFunction(grid, values[:, 1] + 1j * values[:, 2], sidecar.boundary, units, sidecar.t)
    except NormalizationError as exc:
        raise SnapshotFormatError("snapshot is not normalized", context=exc.context) from exc


# ----- Tables -----


def ensemble_frame(ensemble: TrajectoryEnsemble) -> pd.DataFrame:
    """traj_id,t,x,escaped in trajectory-major order."""
    n_rec = ensemble.times.size
    return pd.DataFrame(
        {
            "traj_id": np.repeat(np.arange(ensemble.n_traj), n_rec),
            "t": np.tile(ensemble.times, ensemble.n_traj),
            "x": ensemble.positions.T.ravel(),
            "escaped": ensemble.escaped.T.ravel().astype(np.int8),
        }
    )


def outcomes_frame(report: OutcomeReport) -> pd.DataFrame:
    return pd.DataFrame(list(report.rows()), columns=["outcome", "pointer_x", "prob", "count"])


def series_frame(**columns: Any) -> pd.DataFrame:
    return pd.DataFrame({name: np.asarray(values) for name, values in columns.items()})


# ----- Writer -----


class ArtifactWriter:
    """Sole writer of a run directory; remembers what it wrote, relative to the directory."""

    def __init__(self, out_dir: Union[str, Path]) -> None:
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        self._lock = threading.Lock()

    def _record(self, path: Path) -> Path:
        self.artifacts.append(path.relative_to(self.out_dir).as_posix())
        logger.debug("wrote %s", path)
        return path

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.out_dir / name
        with self._lock:
            frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
            return self._record(path)

    def write_snapshot(self, name: str, psi: WaveFunction) -> Path:
        with self._lock:
            data, meta = save_snapshot(psi, self.out_dir / name)
            self._record(data)
            self._record(meta)
            return data

    def write_summary(self, summary: RunSummary) -> RunSummary:
        """summary.json lists every artifact written before it; returns the summary as written."""
        path = self.out_dir / "summary.json"
        with self._lock:
            summary = summary.model_copy(update={"artifacts": list(self.artifacts)})
            path.write_text(summary.model_dump_json(indent=2), encoding="utf-8")
            self._record(path)
            return summary
