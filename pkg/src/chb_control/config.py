"""Run configuration: strict YAML parsing, defaults and normalization.

A configuration is a mapping of blocks.  Every block and key is checked
against the schema below; unknown keys are errors.  Spatial fields (initial
phase, targets, ``sigma_B``, bounds) accept

* a number (constant field),
* a path to an ``x,y,value`` CSV file, relative to the config file, or
* ``{disc: {center: [x, y], radius: r, width: w}}`` for the profile
  ``tanh((r - |x - center|) / w)``.

The normalized form (``RunConfig.to_dict``) has every default filled in and
every path made absolute, so parsing it again gives the same configuration.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .control import ControlProblem, Objective, OptimizerOptions
from .mesh import GridMismatchError, StructuredGrid, read_scalar_csv
from .model import InterpolationH, ModelParams, Potential
from .state import Scheme, SolverOptions

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "DEFAULTS"]


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


DEFAULTS: dict = {
    "grid": {"nx": 17, "ny": 17, "lx": 1.0, "ly": 1.0},
    "params": {
        "proliferation_P": 0.0, "apoptosis_A": 0.0, "chemotaxis_chi": 0.0,
        "permeability_nu": 1.0, "shear_eta": 1.0, "bulk_lambda": 0.0, "mobility_m": 1.0,
        "nutrient_b": 1.0, "sigma_B": 1.0, "epsilon": 1.0, "final_time_T": 0.1,
    },
    "potential": {"kind": "double_well", "delta": None},
    "h": {"variant": "linear_clamp", "regularization_width": 0.1},
    "solver": {
        "dt": 0.01, "stabilization_S": 2.0, "nonlinear_mode": "stabilized_linear",
        "newton_max_iter": 25, "newton_tol": 1e-10, "linear_tol": 1e-10,
        "velocity_enabled": True, "linear_solver": "direct", "upwind": False,
        "pressure_stabilization": None,
    },
    "initial": {"phi0": -1.0},
    "objective": {"alpha0": 0.0, "alpha1": 0.0, "kappa": 1.0, "phi_f": 0.0, "phi_d": 0.0},
    "control": {"lower": -1.0, "upper": 1.0, "initial": 0.0},
    "optimizer": {
        "step0": 1.0, "armijo_c": 1e-4, "shrink": 0.5, "max_iter": 100, "stop_tol": 1e-6,
        "max_shrinks": 50, "gamma_probe": 1.0,
    },
    "verify": {
        "n_samples": 5, "fd_epsilon": 1e-4, "taylor_epsilons": [1e-1, 10 ** -1.5, 1e-2],
        "gradient_tol_reduced": 1e-3, "gradient_tol_full": 1e-2,
        "state_order": 1.8, "costate_order": 1.6, "control_scale": 0.5,
    },
    "certify": {
        "control": None, "L1": None, "L3": None, "c_p": None, "c_q": None, "theta": None,
        "p": 3.0, "q": 6.0, "n_pairs": 10, "n_sobolev_starts": 20,
    },
    "output": {"directory": "out", "every": 1},
    "seed": 0,
}

_FIELD_KEYS = {("params", "sigma_B"), ("initial", "phi0"), ("objective", "phi_f"),
               ("objective", "phi_d"), ("control", "lower"), ("control", "upper")}
_PATH_KEYS = {("certify", "control"), ("output", "directory")}
_CHOICES = {
    ("potential", "kind"): ("double_well", "smoothed"),
    ("h", "variant"): ("linear_clamp", "quadratic_interface", "cosine_interface"),
    ("solver", "nonlinear_mode"): ("stabilized_linear", "newton"),
    ("solver", "linear_solver"): ("direct", "krylov"),
}


def _merge(defaults: dict, given: dict, where: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        path = f"{where}.{key}" if where else key
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], val if val is not None else {}, path)
        else:
            out[key] = val
    return out


def _field_spec(val, path: str, base_dir: Path):
    """Validate one field spec; relative paths become absolute."""
    if isinstance(val, bool):
        raise ConfigError(f"{path}: expected a number, a CSV path or a disc spec")
    if isinstance(val, (int, float)):
        return float(val)
    if isinstance(val, str):
        p = Path(val)
        if not p.is_absolute():
            p = base_dir / p
        return str(p.resolve())
    if isinstance(val, dict) and set(val) == {"disc"} and isinstance(val["disc"], dict):
        d = val["disc"]
        if set(d) != {"center", "radius", "width"}:
            raise ConfigError(f"{path}.disc: needs exactly center, radius, width")
        try:
            center = [float(c) for c in d["center"]]
            radius, width = float(d["radius"]), float(d["width"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.disc: {exc}") from exc
        if len(center) != 2 or not width > 0:
            raise ConfigError(f"{path}.disc: center needs two entries and width must be positive")
        return {"disc": {"center": center, "radius": radius, "width": width}}
    raise ConfigError(f"{path}: expected a number, a CSV path or a disc spec")


def _number(val, path, kind=float, allow_none=False):
    if val is None and allow_none:
        return None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {val!r}")
    if kind is int:
        if float(val) != int(val):
            raise ConfigError(f"{path}: expected an integer, got {val!r}")
        return int(val)
    return float(val)


def _path(val, path: str, base_dir: Path, allow_none: bool = False):
    if val is None and allow_none:
        return None
    if not isinstance(val, str):
        raise ConfigError(f"{path}: expected a path")
    p = Path(val)
    return str((p if p.is_absolute() else base_dir / p).resolve())


def _normalize(cfg: dict, base_dir: Path) -> dict:
    for block, entries in cfg.items():
        if not isinstance(entries, dict):
            continue
        for key, val in entries.items():
            path = f"{block}.{key}"
            default = DEFAULTS[block][key]
            if (block, key) in _FIELD_KEYS or (block, key) == ("control", "initial"):
                entries[key] = _field_spec(val, path, base_dir)
            elif (block, key) in _PATH_KEYS:
                entries[key] = _path(val, path, base_dir, allow_none=default is None)
            elif (block, key) in _CHOICES:
                if val not in _CHOICES[(block, key)]:
                    raise ConfigError(f"{path}: must be one of {', '.join(_CHOICES[(block, key)])}")
            elif isinstance(default, bool):
                if not isinstance(val, bool):
                    raise ConfigError(f"{path}: expected true or false")
            elif isinstance(default, int):
                entries[key] = _number(val, path, int)
            elif isinstance(default, list):
                if not isinstance(val, list) or len(val) < 2:
                    raise ConfigError(f"{path}: expected a list of at least two numbers")
                entries[key] = [_number(v, path) for v in val]
            else:
                entries[key] = _number(val, path, float, allow_none=default is None)
    cfg["seed"] = _number(cfg["seed"], "seed", int)
    return cfg


@dataclass
class RunConfig:
    data: dict
    source: str | None = None

    # -- construction -------------------------------------------------------

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def with_overrides(self, mode: str | None = None, seed: int | None = None,
                       out: str | None = None) -> "RunConfig":
        data = self.to_dict()
        if mode is not None:
            if mode not in ("reduced", "full"):
                raise ConfigError("--mode must be reduced or full")
            data["solver"]["velocity_enabled"] = mode == "full"
        if seed is not None:
            data["seed"] = int(seed)
        if out is not None:
            data["output"]["directory"] = str(Path(out).resolve())
        return RunConfig(data, self.source)

    # -- domain objects -------------------------------------------------------

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output"]["directory"])

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def mode(self) -> str:
        return "full" if self.data["solver"]["velocity_enabled"] else "reduced"

    def grid(self) -> StructuredGrid:
        g = self.data["grid"]
        try:
            return StructuredGrid(int(g["nx"]), int(g["ny"]), float(g["lx"]), float(g["ly"]))
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from exc

    def field(self, block: str, key: str, grid: StructuredGrid | None = None) -> np.ndarray:
        grid = grid or self.grid()
        spec = self.data[block][key]
        path = f"{block}.{key}"
        if isinstance(spec, float):
            return np.full(grid.n_nodes, spec)
        if isinstance(spec, dict):
            d = spec["disc"]
            x, y = grid.coords
            r = np.hypot(x - d["center"][0], y - d["center"][1])
            return np.tanh((d["radius"] - r) / d["width"])
        if not Path(spec).is_file():
            raise ConfigError(f"{path}: file not found: {spec}")
        try:
            return read_scalar_csv(spec, grid)
        except (ValueError, GridMismatchError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def params(self) -> ModelParams:
        p = dict(self.data["params"])
        sb = p["sigma_B"]
        p["sigma_B"] = sb if isinstance(sb, float) else self.field("params", "sigma_B")
        try:
            return ModelParams(**p)
        except ValueError as exc:
            raise ConfigError(f"params: {exc}") from exc

    def potential(self) -> Potential:
        p = self.data["potential"]
        try:
            if p["kind"] == "smoothed":
                if p["delta"] is None:
                    raise ValueError("smoothed potential needs delta")
                return Potential.smoothed(p["delta"])
            return Potential.double_well()
        except ValueError as exc:
            raise ConfigError(f"potential: {exc}") from exc

    def interpolation(self) -> InterpolationH:
        h = self.data["h"]
        try:
            return InterpolationH(h["variant"], h["regularization_width"])
        except ValueError as exc:
            raise ConfigError(f"h: {exc}") from exc

    def solver_options(self) -> SolverOptions:
        try:
            return SolverOptions(**self.data["solver"])
        except ValueError as exc:
            raise ConfigError(f"solver: {exc}") from exc

    def scheme(self) -> Scheme:
        try:
            return Scheme(self.grid(), self.params(), self.interpolation(), self.potential(),
                          self.solver_options())
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"solver: {exc}") from exc

    def phi0(self, grid=None) -> np.ndarray:
        return self.field("initial", "phi0", grid)

    def objective(self, grid=None) -> Objective:
        o = self.data["objective"]
        try:
            return Objective(o["alpha0"], o["alpha1"], o["kappa"], self.field("objective", "phi_f", grid),
                             self.field("objective", "phi_d", grid))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"objective: {exc}") from exc

    def optimizer_options(self) -> OptimizerOptions:
        try:
            return OptimizerOptions(**self.data["optimizer"])
        except ValueError as exc:
            raise ConfigError(f"optimizer: {exc}") from exc

    def problem(self, scheme: Scheme | None = None) -> ControlProblem:
        scheme = scheme or self.scheme()
        g = scheme.grid
        lower = self.field("control", "lower", g)
        upper = self.field("control", "upper", g)
        if np.any(lower > upper):
            raise ConfigError("control: lower bound exceeds upper bound")
        return ControlProblem(scheme, self.phi0(g), self.objective(g), lower, upper)

    def initial_control(self, scheme: Scheme) -> np.ndarray:
        from .output import read_control_csv
        spec = self.data["control"]["initial"]
        if isinstance(spec, str) and Path(spec).is_file():
            with open(spec) as fh:
                header = fh.readline().strip()
            if header.startswith("step,"):
                try:
                    return read_control_csv(spec, scheme.grid, scheme.n_steps)
                except ValueError as exc:
                    raise ConfigError(f"control.initial: {exc}") from exc
        field = self.field("control", "initial", scheme.grid)
        return np.tile(field, (scheme.n_steps, 1))


def parse_config(raw: dict, base_dir: str | Path = ".", source: str | None = None) -> RunConfig:
    if raw is None:
        raw = {}
    data = _merge(DEFAULTS, raw, "")
    data = _normalize(data, Path(base_dir).resolve())
    cfg = RunConfig(data, source)
    # validate all domain types up front
    scheme = cfg.scheme()
    cfg.objective(scheme.grid)
    cfg.optimizer_options()
    cfg.problem(scheme)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc
    return parse_config(raw, path.parent, str(path))
