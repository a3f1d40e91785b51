"""Writers and readers for run artifacts.

Trajectory directories hold ``manifest.json``, one CSV per field and saved
level under ``fields/`` and ``timeseries.csv``.  Controls are stored as one
CSV with columns ``step,x,y,value``.  All floats are written with ``repr``
so a file read back reproduces the array bit for bit, and no timestamps are
written, so identical runs give identical bytes.
"""
from __future__ import annotations

import csv
import json
from importlib import metadata
from pathlib import Path

import numpy as np

from . import _kernels
from .mesh import GridMismatchError, StructuredGrid, write_scalar_csv, write_vector_csv

__all__ = [
    "code_version",
    "jsonable",
    "write_manifest",
    "write_trajectory",
    "write_costate",
    "write_control_csv",
    "read_control_csv",
    "write_history_csv",
    "read_history_csv",
    "HISTORY_COLUMNS",
    "TIMESERIES_COLUMNS",
]

HISTORY_COLUMNS = ["iter", "J", "residual", "step"]
TIMESERIES_COLUMNS = ["t", "mass_phi", "energy_phi", "vel_L2", "sigma_min", "sigma_max"]


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:  # pragma: no cover
        return "unknown"


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_manifest(path, **content) -> None:
    content.setdefault("code_version", code_version())
    content.setdefault("kernel_backend", _kernels.backend())
    with open(path, "w") as fh:
        json.dump(jsonable(content), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if not isinstance(v, (int, np.integer)) else int(v) for v in row])


def _levels(n_levels: int, every: int):
    levels = list(range(0, n_levels, max(1, int(every))))
    if levels[-1] != n_levels - 1:
        levels.append(n_levels - 1)
    return levels


def write_trajectory(directory, traj, config: dict | None = None, every: int = 1, extra=None) -> Path:
    """Write a state, linearized or costate-like trajectory directory."""
    d = Path(directory)
    (d / "fields").mkdir(parents=True, exist_ok=True)
    grid = traj.grid
    files = []
    for k in _levels(traj.n_steps + 1, every):
        for name in ("phi", "mu", "sigma", "pressure"):
            fn = f"fields/{name}_{k:05d}.csv"
            write_scalar_csv(d / fn, grid, getattr(traj, name)[k])
            files.append(fn)
        fn = f"fields/vel_{k:05d}.csv"
        write_vector_csv(d / fn, grid, traj.vel[k])
        files.append(fn)
    _write_rows(d / "timeseries.csv", TIMESERIES_COLUMNS, traj.timeseries())
    diag = {k: float(np.max(v)) for k, v in getattr(traj, "diagnostics", {}).items()}
    write_manifest(d / "manifest.json", kind=traj.kind, grid=grid.manifest(), dt=traj.dt,
                   n_steps=traj.n_steps, files=files, timeseries="timeseries.csv",
                   timeseries_columns=TIMESERIES_COLUMNS, diagnostics_max=diag,
                   config=config or {}, **(extra or {}))
    return d


def write_costate(directory, costate, config: dict | None = None, every: int = 1) -> Path:
    d = Path(directory)
    (d / "fields").mkdir(parents=True, exist_ok=True)
    grid = costate.base.grid
    files = []
    for k in _levels(costate.n_steps + 1, every):
        for name in ("phi_a", "tau", "rho", "q"):
            fn = f"fields/{name}_{k:05d}.csv"
            write_scalar_csv(d / fn, grid, getattr(costate, name)[k])
            files.append(fn)
        fn = f"fields/w_{k:05d}.csv"
        write_vector_csv(d / fn, grid, costate.w[k])
        files.append(fn)
    diag = {k: float(np.max(v)) for k, v in costate.diagnostics.items()}
    write_manifest(d / "manifest.json", kind="costate", grid=grid.manifest(), dt=costate.base.dt,
                   n_steps=costate.n_steps, files=files, diagnostics_max=diag, config=config or {})
    return d


def write_control_csv(path, grid: StructuredGrid, u: np.ndarray) -> None:
    x, y = grid.coords
    rows = []
    for n in range(u.shape[0]):
        rows.extend((n, xi, yi, vi) for xi, yi, vi in zip(x, y, u[n]))
    _write_rows(path, ["step", "x", "y", "value"], rows)


def read_control_csv(path, grid: StructuredGrid, n_steps: int) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step", "x", "y", "value"]:
        raise ValueError(f"{path}: expected header step,x,y,value")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    if data.shape[0] != n_steps * grid.n_nodes:
        raise GridMismatchError(f"{path}: expected {n_steps} x {grid.n_nodes} rows, got {data.shape[0]}")
    x, y = grid.coords
    u = data[:, 3].reshape(n_steps, grid.n_nodes)
    steps = data[:, 0].reshape(n_steps, grid.n_nodes)
    if not (np.all(steps == np.arange(n_steps)[:, None])
            and np.allclose(data[:, 1].reshape(n_steps, -1), x) and np.allclose(data[:, 2].reshape(n_steps, -1), y)):
        raise GridMismatchError(f"{path}: node coordinates or steps do not match")
    return u


def write_history_csv(path, history) -> None:
    _write_rows(path, HISTORY_COLUMNS, ([int(r["iter"]), r["J"], r["residual"], r["step"]] for r in history))


def read_history_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != HISTORY_COLUMNS:
        raise ValueError(f"{path}: expected header {','.join(HISTORY_COLUMNS)}")
    return [{"iter": int(r[0]), "J": float(r[1]), "residual": float(r[2]), "step": float(r[3])}
            for r in rows[1:]]
