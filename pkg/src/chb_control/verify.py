"""Derivative checks: finite-difference gradient, Taylor remainders and duality."""
from __future__ import annotations

import numpy as np

from .adjoint import AdjointRHS, frechet_costate, multiplier_pairing, pairing, solve_adjoint_general, \
    solve_costate, time_weights
from .control import ControlProblem
from .sensitivity import LinearizedRHS, frechet_state, solve_linearized

__all__ = [
    "observed_order",
    "random_control",
    "gradient_check",
    "taylor_state",
    "taylor_costate",
    "duality_check",
]


def observed_order(eps, errors) -> dict:
    """Least-squares slope of ``log(error)`` against ``log(eps)`` plus pairwise slopes."""
    le, lr = np.log(np.asarray(eps, dtype=float)), np.log(np.asarray(errors, dtype=float))
    slope = float(np.polyfit(le, lr, 1)[0])
    pairwise = (np.diff(lr) / np.diff(le)).tolist()
    return {"fitted": slope, "pairwise": pairwise, "min": float(min(pairwise))}


def random_control(problem: ControlProblem, rng: np.random.Generator, scale: float = 0.5) -> np.ndarray:
    """Smooth-ish random control inside the box (projected Gaussian)."""
    u = scale * rng.standard_normal(problem.scheme.control_shape())
    return problem.project(u)


def gradient_check(problem: ControlProblem, n_samples: int = 5, eps: float = 1e-4, seed: int = 0,
                   tol: float | None = None, scale: float = 0.5) -> dict:
    """Compare ``(g, h)`` with the central difference ``(J(u + eps h) - J(u - eps h)) / 2 eps``."""
    if tol is None:
        tol = 1e-2 if problem.scheme.opts.velocity_enabled else 1e-3
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_samples):
        u = random_control(problem, rng, scale)
        h = rng.standard_normal(u.shape)
        adj = problem.inner(problem.gradient(u), h)
        fd = (problem.cost(u + eps * h) - problem.cost(u - eps * h)) / (2 * eps)
        rel = abs(adj - fd) / max(abs(fd), np.finfo(float).tiny)
        rows.append({"adjoint": adj, "finite_difference": fd, "relative_error": rel})
    worst = max(r["relative_error"] for r in rows)
    return {"check": "gradient", "epsilon": eps, "tolerance": tol, "samples": rows,
            "max_relative_error": worst, "passed": bool(worst <= tol)}


def _state_error(sc, a, b, e, d) -> float:
    diff = a.phi - b.phi - e * d.phi
    wts = time_weights(a.n_steps, sc.dt)
    return float(np.sqrt(np.sum(wts * (diff ** 2 @ sc.mL))))


def taylor_state(problem: ControlProblem, epsilons=(1e-1, 10 ** -1.5, 1e-2), seed: int = 0,
                 threshold: float = 1.8, scale: float = 0.5) -> dict:
    """Remainder ``||S(u + eps h) - S(u) - eps S'(u) h||`` of the phase field in ``L2(L2)``."""
    rng = np.random.default_rng(seed)
    sc = problem.scheme
    u = random_control(problem, rng, scale)
    h = rng.standard_normal(u.shape)
    base = sc.solve(u, problem.phi0)
    lin = frechet_state(base, h)
    errors = [_state_error(sc, sc.solve(u + e * h, problem.phi0), base, e, lin) for e in epsilons]
    order = observed_order(epsilons, errors)
    return {"check": "taylor-state", "epsilons": list(epsilons), "errors": errors, "order": order,
            "threshold": threshold, "passed": bool(order["fitted"] >= threshold), "linearized": lin}


def _costate_error(a, b, e, d) -> float:
    sc = a.base.scheme
    wts = time_weights(a.n_steps, sc.dt)
    tot = 0.0
    for name in ("phi_a", "tau", "rho", "w", "q"):
        diff = getattr(a, name) - getattr(b, name) - e * getattr(d, name)
        sq = diff ** 2 if diff.ndim == 2 else np.sum(diff ** 2, axis=1)
        tot += np.sum(wts * (sq @ sc.mL))
    return float(np.sqrt(tot))


def taylor_costate(problem: ControlProblem, epsilons=(1e-1, 10 ** -1.5, 1e-2), seed: int = 0,
                   threshold: float = 1.6, scale: float = 0.5) -> dict:
    """Remainder ``||A(u + eps h) - A(u) - eps A'(u) h||`` over all costate fields."""
    rng = np.random.default_rng(seed)
    sc = problem.scheme
    u = random_control(problem, rng, scale)
    h = rng.standard_normal(u.shape)
    base = sc.solve(u, problem.phi0)
    co = solve_costate(base, problem.objective)
    dco = frechet_costate(base, h, co, frechet_state(base, h), problem.objective)
    errors = []
    for e in epsilons:
        co_e = solve_costate(sc.solve(u + e * h, problem.phi0), problem.objective)
        errors.append(_costate_error(co_e, co, e, dco))
    order = observed_order(epsilons, errors)
    return {"check": "taylor-costate", "epsilons": list(epsilons), "errors": errors, "order": order,
            "threshold": threshold, "passed": bool(order["fitted"] >= threshold)}


def duality_check(problem: ControlProblem, n_pairs: int = 5, seed: int = 0, scale: float = 0.5) -> dict:
    """Pair random tangent data with random adjoint data in both directions.

    ``ell_G(S'[F, h]) = -sum_k lambda_k(G) . r_k(F, h)`` must hold up to the
    linear-solver tolerance.
    """
    sc = problem.scheme
    tol = 10 * sc.opts.linear_tol
    rng = np.random.default_rng(seed)
    u = random_control(problem, rng, scale)
    base = sc.solve(u, problem.phi0)
    levels = base.n_steps + 1
    rows = []
    for _ in range(n_pairs):
        F = LinearizedRHS.random(rng, levels, sc.n)
        G = AdjointRHS.random(rng, levels, sc.n)
        h = rng.standard_normal(u.shape)
        lhs = pairing(solve_linearized(base, F, h), G)
        rhs = multiplier_pairing(solve_adjoint_general(base, G), F, h)
        rel = abs(lhs - rhs) / max(abs(lhs), abs(rhs), np.finfo(float).tiny)
        rows.append({"forward": lhs, "adjoint": rhs, "relative_error": rel})
    worst = max(r["relative_error"] for r in rows)
    return {"check": "duality", "tolerance": tol, "pairs": rows, "max_relative_error": worst,
            "passed": bool(worst <= tol)}
