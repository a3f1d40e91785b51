"""Command line entry point.

Subcommands ``simulate``, ``optimize``, ``verify``, ``certify`` and
``estimate-constants`` share the flags ``--config``, ``--out``, ``--seed``
and ``--mode reduced|full``.  Exit codes: 0 success, 2 configuration error
(including missing input artifacts), 3 solver failure, 4 verification
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .adjoint import solve_costate
from .config import ConfigError, RunConfig, load_config
from .control import (LineSearchFailure, MissingConstants, certify_global, estimate_lipschitz,
                      estimate_sobolev_constant, projected_gradient, projection_fixed_point_residual,
                      space_time_norm, uniqueness_time_bound)
from .linalg import SolverDivergence
from .model import h_sup_norms
from .output import (jsonable, read_control_csv, read_history_csv, write_control_csv, write_costate,
                     write_history_csv, write_manifest, write_trajectory)
from .verify import duality_check, gradient_check, taylor_costate, taylor_state

log = logging.getLogger("chb_control")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4
CHECKS = ("gradient", "taylor-state", "taylor-costate", "duality")

__all__ = ["main", "build_parser", "run_simulate", "run_optimize", "run_verify", "run_certify",
           "run_estimate_constants", "MissingArtifacts"]


class MissingArtifacts(ConfigError):
    """An input produced by an earlier run is absent."""


def _out(cfg: RunConfig) -> Path:
    d = cfg.output_dir
    d.mkdir(parents=True, exist_ok=True)
    return d


def _run_manifest(cfg: RunConfig, subcommand: str, **extra) -> None:
    write_manifest(_out(cfg) / f"{subcommand}_manifest.json", subcommand=subcommand,
                   config=cfg.to_dict(), **extra)


def _write_yaml(path: Path, data: dict) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(jsonable(data), fh, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands

def run_simulate(cfg: RunConfig) -> int:
    scheme = cfg.scheme()
    problem = cfg.problem(scheme)
    u = cfg.initial_control(scheme)
    traj = scheme.solve(problem.project(u), problem.phi0)
    out = _out(cfg)
    write_trajectory(out / "trajectory", traj, cfg.to_dict(), cfg.data["output"]["every"])
    _run_manifest(cfg, "simulate", n_steps=traj.n_steps,
                  max_constraint_residual=float(np.max(traj.diagnostics["constraint_residual"])))
    log.info("simulate: %d steps written to %s", traj.n_steps, out / "trajectory")
    return EXIT_OK


def _atomic_write(writer, path: Path, *args):
    tmp = path.with_suffix(path.suffix + ".tmp")
    writer(tmp, *args)
    os.replace(tmp, path)


def run_optimize(cfg: RunConfig, resume: bool = False) -> int:
    scheme = cfg.scheme()
    problem = cfg.problem(scheme)
    opts = cfg.optimizer_options()
    out = _out(cfg)
    ckpt = out / "checkpoint"
    ckpt.mkdir(exist_ok=True)
    u0, history = cfg.initial_control(scheme), None
    if resume:
        if not (ckpt / "control.csv").is_file() or not (ckpt / "history.csv").is_file():
            raise MissingArtifacts(f"--resume: no checkpoint in {ckpt}")
        u0 = read_control_csv(ckpt / "control.csv", scheme.grid, scheme.n_steps)
        history = read_history_csv(ckpt / "history.csv")
        log.info("optimize: resuming at iteration %d", history[-1]["iter"])

    def checkpoint(u, hist):
        _atomic_write(write_control_csv, ckpt / "control.csv", scheme.grid, u)
        _atomic_write(write_history_csv, ckpt / "history.csv", hist)
        row = hist[-1]
        log.info("iter %4d  J=%.10e  residual=%.3e  step=%.3e", row["iter"], row["J"], row["residual"], row["step"])

    u_star, history = projected_gradient(problem, u0, opts, history, checkpoint)
    g = problem.gradient(u_star)
    res = problem.residual(u_star, g, opts.gamma_probe)
    write_control_csv(out / "control.csv", scheme.grid, u_star)
    write_control_csv(out / "gradient.csv", scheme.grid, g)
    write_history_csv(out / "history.csv", history)
    summary = {"J": problem.cost(u_star), "stationarity_residual": res, "iterations": history[-1]["iter"],
               "converged": bool(res <= opts.stop_tol)}
    if problem.objective.kappa > 0:
        summary["projection_fixed_point_residual"] = projection_fixed_point_residual(problem, u_star)
    every = cfg.data["output"]["every"]
    write_trajectory(out / "state", problem.state(u_star), cfg.to_dict(), every)
    write_costate(out / "costate", problem.costate(u_star), cfg.to_dict(), every)
    _run_manifest(cfg, "optimize", summary=summary, resumed=bool(resume))
    log.info("optimize: J=%.10e residual=%.3e after %d iterations", summary["J"], res, summary["iterations"])
    return EXIT_OK


def run_verify(cfg: RunConfig, which: str = "all") -> int:
    v = cfg.data["verify"]
    problem = cfg.problem()
    checks = CHECKS if which == "all" else (which,)
    seed, scale = cfg.seed, v["control_scale"]
    results = {}
    for name in checks:
        if name == "gradient":
            tol = v["gradient_tol_full"] if cfg.mode == "full" else v["gradient_tol_reduced"]
            r = gradient_check(problem, v["n_samples"], v["fd_epsilon"], seed, tol, scale)
        elif name == "taylor-state":
            r = taylor_state(problem, v["taylor_epsilons"], seed, v["state_order"], scale)
            write_trajectory(_out(cfg) / "linearized", r.pop("linearized"), cfg.to_dict(),
                             cfg.data["output"]["every"])
        elif name == "taylor-costate":
            r = taylor_costate(problem, v["taylor_epsilons"], seed, v["costate_order"], scale)
        elif name == "duality":
            r = duality_check(problem, v["n_samples"], seed, scale)
        else:
            raise ConfigError(f"unknown check {name!r}")
        results[name] = r
        print(f"{name}: {'PASS' if r['passed'] else 'FAIL'}")
    passed = all(r["passed"] for r in results.values())
    report = {"mode": cfg.mode, "passed": passed, "checks": results}
    with open(_out(cfg) / "verify_report.json", "w") as fh:
        json.dump(jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _run_manifest(cfg, "verify", checks=list(checks), passed=passed)
    return EXIT_OK if passed else EXIT_VERIFY


def _constants(cfg: RunConfig, problem) -> dict:
    """Configured constants, with sampled estimates filling the gaps."""
    c = cfg.data["certify"]
    seed, n_pairs = cfg.seed, c["n_pairs"]
    out = {}
    for key, kind, norm in (("L1", "state", "phi_Linf"), ("L3", "costate", "phi_L2")):
        if c[key] is not None:
            out[key] = {"value": c[key], "provenance": "configured"}
        else:
            est = estimate_lipschitz(problem, kind, n_pairs, seed, norm)
            out[key] = {"value": est["value"], "provenance": "estimated", "norm": norm}
    for key, p in (("c_p", c["p"]), ("c_q", c["q"])):
        if c[key] is not None:
            out[key] = {"value": c[key], "provenance": "configured", "p": p}
        else:
            est = estimate_sobolev_constant(problem.scheme.grid, p, c["n_sobolev_starts"], seed)
            out[key] = {"value": est["value"], "provenance": "estimated", "p": p}
    if c["theta"] is not None:
        out["theta"] = {"value": c["theta"], "provenance": "configured"}
    return out


def run_estimate_constants(cfg: RunConfig) -> int:
    problem = cfg.problem()
    consts = _constants(cfg, problem)
    _write_yaml(_out(cfg) / "constants.yaml", {"label": "estimated lower bounds", "constants": consts})
    _run_manifest(cfg, "estimate-constants")
    return EXIT_OK


def run_certify(cfg: RunConfig, control_path: str | None = None) -> int:
    scheme = cfg.scheme()
    problem = cfg.problem(scheme)
    path = Path(control_path or cfg.data["certify"]["control"] or cfg.output_dir / "control.csv")
    if not path.is_file():
        raise MissingArtifacts(f"missing_artifacts: optimized control not found at {path}")
    u_bar = read_control_csv(path, scheme.grid, scheme.n_steps)
    consts = _constants(cfg, problem)
    try:
        report = certify_global(problem, u_bar, consts)
    except MissingConstants as exc:
        raise ConfigError(str(exc)) from exc
    data = report.to_dict()
    kappa = problem.objective.kappa
    base = problem.state(u_bar)
    co = solve_costate(base, problem.objective)
    phi_norm = space_time_norm(scheme, co.phi_a, "L2H1")
    h1sup = float(h_sup_norms(scheme.h)[1])
    if kappa > 0:
        bound = uniqueness_time_bound(kappa, consts["L1"]["value"], consts["L3"]["value"], phi_norm,
                                      consts["c_p"]["value"], consts["c_q"]["value"], h1sup)
        T = scheme.params.final_time_T
        data["uniqueness"] = {"T_bound": bound, "T": T, "satisfied": bool(T < bound),
                              "phi_a_L2H1": phi_norm, "h_prime_sup": h1sup}
    data["control"] = str(path)
    data["stationarity_residual"] = problem.residual(u_bar)
    _write_yaml(_out(cfg) / "certificate.yaml", data)
    _run_manifest(cfg, "certify", control=str(path))
    print(" ".join(f"{k}={'yes' if v else 'no'}" for k, v in data["flags"].items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chb-control",
                                     description="Optimal control of a Cahn-Hilliard-Brinkman tumour model.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML (or JSON) run configuration")
        p.add_argument("--out", help="output directory (overrides output.directory)")
        p.add_argument("--seed", type=int, help="random seed (overrides seed)")
        p.add_argument("--mode", choices=("reduced", "full"), help="velocity off (reduced) or on (full)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("simulate", help="solve the state system and write the trajectory"))
    p = common(sub.add_parser("optimize", help="projected-gradient optimization"))
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint")
    p = common(sub.add_parser("verify", help="derivative and duality checks"))
    p.add_argument("--check", choices=CHECKS + ("all",), default="all")
    p = common(sub.add_parser("certify", help="evaluate the optimality certificates"))
    p.add_argument("--control", help="control CSV (default: <out>/control.csv)")
    common(sub.add_parser("estimate-constants", help="sample Lipschitz and Sobolev constants"))
    return parser


def _load(args) -> RunConfig:
    path = Path(args.config)
    cfg = load_config(path)
    return cfg.with_overrides(args.mode, args.seed, args.out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load(args)
        if args.command == "simulate":
            return run_simulate(cfg)
        if args.command == "optimize":
            return run_optimize(cfg, args.resume)
        if args.command == "verify":
            return run_verify(cfg, args.check)
        if args.command == "certify":
            return run_certify(cfg, args.control)
        return run_estimate_constants(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverDivergence, LineSearchFailure, np.linalg.LinAlgError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER

