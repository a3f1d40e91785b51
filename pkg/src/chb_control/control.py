"""Reduced cost, gradient, projected-gradient optimizer and optimality certificates.

Controls are piecewise constant in time: slice ``n`` acts on the interval
``(t_n, t_{n+1})`` and has shape ``(n_nodes,)``.  The control inner product
is ``(u, v) = sum_n dt * sum_i m_i u_n,i v_n,i`` with the lumped mass ``m``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .adjoint import CostateTrajectory, frechet_costate, solve_costate, time_weights
from .mesh import StructuredGrid, assemble_stiffness_neumann, lumped_mass
from .model import h_sup_norms, psi_third_bound
from .sensitivity import frechet_state
from .state import Scheme, Trajectory

__all__ = [
    "BoundsViolation",
    "LineSearchFailure",
    "MissingConstants",
    "ControlField",
    "Objective",
    "OptimizerOptions",
    "ControlProblem",
    "cost",
    "gradient",
    "project",
    "stationarity_residual",
    "projected_gradient",
    "projection_fixed_point_residual",
    "second_order_form",
    "critical_cone_filter",
    "check_second_order",
    "ConditionRecord",
    "CertificateReport",
    "certify_global",
    "uniqueness_time_bound",
    "estimate_lipschitz",
    "estimate_sobolev_constant",
    "space_time_norm",
]


class BoundsViolation(ValueError):
    """Lower bound exceeds upper bound somewhere."""


class LineSearchFailure(RuntimeError):
    """Armijo backtracking exhausted its shrink budget."""


class MissingConstants(ValueError):
    """A certificate needs a constant that was neither configured nor estimated."""


# ---------------------------------------------------------------------------
# data types

@dataclass
class ControlField:
    """Control values with nodal box bounds, all of shape ``(n_steps, n_nodes)``."""

    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        shape = self.values.shape
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), shape).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), shape).copy()
        if np.any(self.lower > self.upper):
            raise BoundsViolation("bounds_violation: lower bound exceeds upper bound")

    @classmethod
    def constant(cls, shape, value=0.0, lower=-np.inf, upper=np.inf) -> "ControlField":
        return cls(np.full(shape, float(value)), lower, upper)

    def admissible(self, tol: float = 1e-12) -> bool:
        return bool(np.all(self.values >= self.lower - tol) and np.all(self.values <= self.upper + tol))

    def with_values(self, values) -> "ControlField":
        return ControlField(values, self.lower, self.upper)

    def radius(self, scheme: Scheme) -> float:
        """``||a|| + ||b|| + 1`` in the control norm (finite bounds only)."""
        return _norm(scheme, self.lower) + _norm(scheme, self.upper) + 1.0


@dataclass
class Objective:
    """Tracking weights and targets.

    ``phi_f`` is a nodal field; ``phi_d`` is either one nodal field (constant
    in time) or one field per time level.
    """

    alpha0: float = 0.0
    alpha1: float = 0.0
    kappa: float = 1.0
    phi_f: np.ndarray | float = 0.0
    phi_d: np.ndarray | float = 0.0

    def __post_init__(self):
        for name in ("alpha0", "alpha1", "kappa"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val >= 0):
                raise ValueError(f"{name} must be finite and non-negative")

    def phi_f_nodal(self, n_nodes: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.phi_f, dtype=float), (n_nodes,))

    def phi_d_nodal(self, n_levels: int, n_nodes: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.phi_d, dtype=float), (n_levels, n_nodes))


@dataclass(frozen=True)
class OptimizerOptions:
    step0: float = 1.0
    armijo_c: float = 1e-4
    shrink: float = 0.5
    max_iter: int = 100
    stop_tol: float = 1e-6
    max_shrinks: int = 50
    gamma_probe: float = 1.0

    def __post_init__(self):
        if not (self.step0 > 0 and 0 < self.armijo_c < 1 and 0 < self.shrink < 1):
            raise ValueError("need step0 > 0 and armijo_c, shrink in (0, 1)")
        if self.max_iter < 0 or not self.stop_tol > 0:
            raise ValueError("need max_iter >= 0 and stop_tol > 0")


# ---------------------------------------------------------------------------
# norms on the control space

def _inner(scheme: Scheme, a: np.ndarray, b: np.ndarray) -> float:
    return float(scheme.dt * np.sum((a * b) @ scheme.mL))


def _norm(scheme: Scheme, a: np.ndarray) -> float:
    return float(np.sqrt(max(_inner(scheme, a, a), 0.0)))


def space_time_norm(scheme: Scheme, a: np.ndarray, kind: str) -> float:
    """Space-time norm of a field given on all time levels (trapezoid in time)."""
    if kind == "Linf":
        return float(np.max(np.abs(a)))
    wts = time_weights(a.shape[0] - 1, scheme.dt)
    sq = a ** 2 if a.ndim == 2 else np.sum(a ** 2, axis=1)
    if kind == "L1":
        ab = np.abs(a) if a.ndim == 2 else np.sqrt(sq)
        return float(np.sum(wts * (ab @ scheme.mL)))
    if kind == "L2":
        return float(np.sqrt(np.sum(wts * (sq @ scheme.mL))))
    if kind == "L2H1":
        K = scheme.K
        semi = sum(wts[k] * (a[k] @ (K @ a[k])) for k in range(a.shape[0]))
        return float(np.sqrt(np.sum(wts * (sq @ scheme.mL)) + semi))
    raise ValueError(f"unknown norm kind {kind!r}")


# ---------------------------------------------------------------------------
# cost and gradient

def cost(u, base: Trajectory, objective: Objective) -> float:
    """Tracking cost with lumped-mass space norms and trapezoidal time quadrature."""
    sc = base.scheme
    u = np.asarray(getattr(u, "values", u), dtype=float)
    if u.shape != sc.control_shape():
        raise ValueError("control does not match the trajectory grid")
    mL = sc.mL
    n_levels = base.n_steps + 1
    dN = base.phi[-1] - objective.phi_f_nodal(sc.n)
    d = base.phi - objective.phi_d_nodal(n_levels, sc.n)
    wts = time_weights(base.n_steps, sc.dt)
    return float(0.5 * objective.alpha0 * (mL @ dN ** 2)
                 + 0.5 * objective.alpha1 * np.sum(wts * (d ** 2 @ mL))
                 + 0.5 * objective.kappa * _inner(sc, u, u))


def gradient(u, base: Trajectory, costate: CostateTrajectory, kappa: float) -> np.ndarray:
    """Riesz representative ``kappa u - phi_a h(phi)`` per control slice."""
    u = np.asarray(getattr(u, "values", u), dtype=float)
    h = base.scheme.h
    return kappa * u - costate.phi_a[:-1] * h(base.phi[:-1])


def project(values, a, b) -> np.ndarray:
    """Nodal clamp ``max(a, min(b, s))``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a > b):
        raise BoundsViolation("bounds_violation: lower bound exceeds upper bound")
    return np.maximum(a, np.minimum(b, np.asarray(values, dtype=float)))


def stationarity_residual(u, g, a, b, gamma_probe: float = 1.0, scheme: Scheme | None = None) -> float:
    """``||u - P(u - gamma g)|| / max(1, ||u||)`` in the control norm.

    Without a scheme the plain Euclidean norm is used.
    """
    if not gamma_probe > 0:
        raise ValueError("gamma_probe must be positive")
    u = np.asarray(u, dtype=float)
    r = u - project(u - gamma_probe * np.asarray(g), a, b)
    if scheme is None:
        return float(np.linalg.norm(r) / max(1.0, np.linalg.norm(u)))
    return _norm(scheme, r) / max(1.0, _norm(scheme, u))


class ControlProblem:
    """Reduced problem ``u -> J(S(u))`` on a fixed scheme, initial state and box."""

    def __init__(self, scheme: Scheme, phi0: np.ndarray, objective: Objective, lower, upper):
        self.scheme = scheme
        self.phi0 = scheme.grid.check(phi0)
        self.objective = objective
        shape = scheme.control_shape()
        self.lower = np.broadcast_to(np.asarray(lower, dtype=float), shape).copy()
        self.upper = np.broadcast_to(np.asarray(upper, dtype=float), shape).copy()
        if np.any(self.lower > self.upper):
            raise BoundsViolation("bounds_violation: lower bound exceeds upper bound")
        self._cache: dict = {}

    def _key(self, u):
        return np.ascontiguousarray(u).tobytes()

    def state(self, u) -> Trajectory:
        u = np.asarray(getattr(u, "values", u), dtype=float)
        key = self._key(u)
        hit = self._cache.get(key)
        if hit is None:
            hit = {"state": self.scheme.solve(u, self.phi0)}
            self._cache = {key: hit}
        return hit["state"]

    def costate(self, u) -> CostateTrajectory:
        base = self.state(u)
        hit = self._cache[self._key(np.asarray(getattr(u, "values", u), dtype=float))]
        if "costate" not in hit:
            hit["costate"] = solve_costate(base, self.objective)
        return hit["costate"]

    def cost(self, u) -> float:
        return cost(u, self.state(u), self.objective)

    def gradient(self, u) -> np.ndarray:
        return gradient(u, self.state(u), self.costate(u), self.objective.kappa)

    def project(self, u) -> np.ndarray:
        return project(u, self.lower, self.upper)

    def residual(self, u, g=None, gamma_probe: float = 1.0) -> float:
        g = self.gradient(u) if g is None else g
        return stationarity_residual(u, g, self.lower, self.upper, gamma_probe, self.scheme)

    def inner(self, a, b) -> float:
        return _inner(self.scheme, a, b)

    def norm(self, a) -> float:
        return _norm(self.scheme, a)

    def zero_control(self) -> np.ndarray:
        return self.scheme.zero_control()


# ---------------------------------------------------------------------------
# optimizer

def projected_gradient(problem: ControlProblem, u0, opts: OptimizerOptions = OptimizerOptions(),
                       history: list | None = None, callback=None):
    """Projected gradient descent with Armijo backtracking along the projection arc.

    A trial ``P(u - gamma g)`` is accepted when
    ``J(trial) <= J(u) - c / gamma * ||trial - u||^2``; otherwise ``gamma``
    shrinks.  Each iteration starts from twice the last accepted step.

    Returns ``(u_star, history)`` where history rows are dicts with keys
    ``iter, J, residual, step`` (``step`` is the step that produced the
    iterate).  To resume from a checkpoint pass the saved iterate as ``u0``
    together with the saved history; ``max_iter`` counts all iterations.
    ``callback(u, history)`` runs after every logged iterate.
    """
    u = problem.project(np.asarray(getattr(u0, "values", u0), dtype=float))
    history = [] if history is None else [dict(r) for r in history]
    it = int(history[-1]["iter"]) if history else 0
    step = float(history[-1]["step"]) if history else 0.0
    J = problem.cost(u)
    while True:
        g = problem.gradient(u)
        res = problem.residual(u, g, opts.gamma_probe)
        row = {"iter": it, "J": J, "residual": res, "step": step}
        if history and history[-1]["iter"] == it:
            history[-1] = row
        else:
            history.append(row)
        if callback is not None:
            callback(u, history)
        if res <= opts.stop_tol or it >= opts.max_iter:
            break
        gamma = min(2.0 * step, opts.step0 * 1e4) if step > 0 else opts.step0
        for _ in range(opts.max_shrinks):
            trial = problem.project(u - gamma * g)
            J_trial = problem.cost(trial)
            if J_trial <= J - opts.armijo_c / gamma * problem.norm(trial - u) ** 2:
                break
            gamma *= opts.shrink
        else:
            raise LineSearchFailure(f"line_search_failure at iteration {it}")
        u, J, step = trial, J_trial, gamma
        it += 1
    return u, history


def projection_fixed_point_residual(problem: ControlProblem, u) -> float:
    """``||u - P(phi_a h(phi) / kappa)|| / max(1, ||u||)``."""
    kappa = problem.objective.kappa
    if not kappa > 0:
        raise ValueError("projection formula needs kappa > 0")
    base, co = problem.state(u), problem.costate(u)
    target = co.phi_a[:-1] * problem.scheme.h(base.phi[:-1]) / kappa
    r = u - problem.project(target)
    return problem.norm(r) / max(1.0, problem.norm(u))


# ---------------------------------------------------------------------------
# second-order analysis

def second_order_form(problem: ControlProblem, u_bar, h_dir) -> float:
    """``J''(u)[h, h] = kappa ||h||^2 - (phi_a' h(phi) + phi_a h'(phi) phi', h)``."""
    sc = problem.scheme
    u_bar = np.asarray(u_bar, dtype=float)
    h_dir = np.asarray(getattr(h_dir, "values", h_dir), dtype=float)
    base, co = problem.state(u_bar), problem.costate(u_bar)
    lin = frechet_state(base, h_dir)
    dco = frechet_costate(base, h_dir, co, lin, problem.objective)
    phi = base.phi[:-1]
    integrand = dco.phi_a[:-1] * sc.h(phi) + co.phi_a[:-1] * sc.h(phi, 1) * lin.phi[:-1]
    return problem.objective.kappa * _inner(sc, h_dir, h_dir) - _inner(sc, integrand, h_dir)


def critical_cone_filter(u_bar, g, a, b, h_dir, tol_active=None, tol_grad=None) -> np.ndarray:
    """Restrict a direction to the numerical cone of critical directions.

    Defaults: ``tol_active = 1e-6 (b - a)`` nodally, ``tol_grad = 1e-6 max|g|``.
    """
    u_bar, g, h = (np.asarray(x, dtype=float) for x in (u_bar, g, h_dir))
    a = np.broadcast_to(np.asarray(a, dtype=float), u_bar.shape)
    b = np.broadcast_to(np.asarray(b, dtype=float), u_bar.shape)
    if tol_active is None:
        width = np.where(np.isfinite(b - a), b - a, 0.0)
        tol_active = 1e-6 * width
    if tol_grad is None:
        tol_grad = 1e-6 * float(np.max(np.abs(g))) if g.size else 0.0
    out = h.copy()
    at_lower = np.abs(u_bar - a) <= tol_active
    at_upper = np.abs(u_bar - b) <= tol_active
    out = np.where(at_lower, np.maximum(out, 0.0), out)
    out = np.where(at_upper, np.minimum(out, 0.0), out)
    out = np.where(np.abs(g) > tol_grad, 0.0, out)
    return out


def check_second_order(problem: ControlProblem, u_bar, n_samples: int = 20, seed: int = 0) -> dict:
    """Sample critical directions and evaluate the second-order form on them.

    This is sampled evidence for positivity on the critical cone, not a proof.
    """
    u_bar = np.asarray(u_bar, dtype=float)
    g = problem.gradient(u_bar)
    rng = np.random.default_rng(seed)
    values, ratios = [], []
    empty = 0
    for _ in range(n_samples):
        h = critical_cone_filter(u_bar, g, problem.lower, problem.upper,
                                 rng.standard_normal(u_bar.shape))
        hn = problem.norm(h)
        if hn == 0.0:
            empty += 1
            continue
        val = second_order_form(problem, u_bar, h)
        values.append(val)
        ratios.append(val / hn ** 2)
    report = {
        "label": "sampled evidence, not a proof",
        "n_samples": n_samples,
        "n_filtered_to_zero": empty,
        "values": values,
        "min_value": min(values) if values else None,
        "min_ratio": min(ratios) if ratios else None,
        "all_positive": bool(values) and all(v > 0 for v in values),
    }
    if not values:
        report["note"] = "cone trivially empty at samples"
    return report


# ---------------------------------------------------------------------------
# certificates

@dataclass(frozen=True)
class ConditionRecord:
    left: float
    right: float
    satisfied: bool
    strict: bool
    terms: dict = field(default_factory=dict)

    @classmethod
    def compare(cls, left: float, right: float, terms=None) -> "ConditionRecord":
        return cls(float(left), float(right), bool(left >= right), bool(left > right), dict(terms or {}))


@dataclass
class CertificateReport:
    conditions: dict
    constants: dict        # name -> {"value": ..., "provenance": ...}
    flags: dict
    norms: dict
    label: str = "heuristic: constants are sampled lower bounds or configured values"

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "flags": dict(self.flags),
            "constants": {k: dict(v) for k, v in self.constants.items()},
            "norms": dict(self.norms),
            "conditions": {k: {"left": c.left, "right": c.right, "satisfied": c.satisfied,
                               "strict": c.strict, "terms": dict(c.terms)}
                           for k, c in self.conditions.items()},
        }


def _const(constants: dict, name: str):
    """Split a constant given as a number or as ``{"value": v, "provenance": tag}``."""
    val = constants.get(name)
    if val is None:
        return None, None
    if isinstance(val, dict):
        return float(val["value"]), str(val.get("provenance", "configured"))
    return float(val), "configured"


def certify_global(problem: ControlProblem, u_bar, constants: dict) -> CertificateReport:
    """Evaluate both sides of the globality (G1, G2) and uniqueness (U1, U2) conditions.

    ``constants`` holds ``L1`` (required) and optionally ``theta``; each is a
    number (provenance ``configured``) or ``{"value", "provenance"}``.  When
    ``theta`` is absent the smallest value satisfying the first G2 inequality
    is used (provenance ``derived``).
    """
    sc = problem.scheme
    obj = problem.objective
    u_bar = np.asarray(u_bar, dtype=float)
    base, co = problem.state(u_bar), problem.costate(u_bar)
    L1, L1_tag = _const(constants, "L1")
    if L1 is None:
        raise MissingConstants("missing_constants: L1 is required for condition G1")
    P, A = sc.params.proliferation_P, sc.params.apoptosis_A

    # control slices live on levels 0..N-1; extend by the last slice so every level has a value
    u_lv = np.concatenate([u_bar, u_bar[-1:]], axis=0)
    combo = (P * base.sigma - A) * (co.phi_a - co.q) - base.sigma * co.rho - u_lv * co.phi_a
    _, h1sup, h2sup, _ = h_sup_norms(sc.h)
    r = float(np.max(np.abs(base.phi)))
    psi3 = psi_third_bound(sc.pot, r)
    norms = {
        "combo_L1": space_time_norm(sc, combo, "L1"),
        "combo_Linf": space_time_norm(sc, combo, "Linf"),
        "tau_L1": space_time_norm(sc, co.tau, "L1"),
        "tau_Linf": space_time_norm(sc, co.tau, "Linf"),
        "phi_a_L2": space_time_norm(sc, co.phi_a, "L2"),
        "phi_a_Linf": space_time_norm(sc, co.phi_a, "Linf"),
        "phi_a_L2H1": space_time_norm(sc, co.phi_a, "L2H1"),
        "h_prime_sup": float(h1sup),
        "h_second_sup": float(h2sup),
        "psi_third_bound": float(psi3),
    }
    kappa, alpha1 = obj.kappa, obj.alpha1

    t1 = norms["combo_L1"] * h2sup * L1 ** 2
    t2 = norms["tau_L1"] * psi3 * L1 ** 2
    t3 = norms["phi_a_L2"] * h1sup * L1
    g1 = ConditionRecord.compare(0.5 * kappa, t1 + t2 + t3, {"combo": t1, "tau": t2, "phi_a": t3})

    theta, theta_tag = _const(constants, "theta")
    g21_right = norms["phi_a_Linf"] ** 2 * h2sup
    if theta is None:
        theta = g21_right / (2 * kappa) if kappa > 0 else np.inf
        theta_tag = "derived"
    g21 = ConditionRecord.compare(2 * kappa * theta, g21_right)
    s1 = norms["combo_Linf"] * h2sup
    s2 = norms["tau_Linf"] * psi3
    s3 = theta * norms["phi_a_Linf"] ** 2 * h1sup ** 2 if np.isfinite(theta) else np.inf
    g22 = ConditionRecord.compare(0.5 * alpha1, s1 + s2 + s3, {"combo": s1, "tau": s2, "phi_a": s3})

    flags = {
        "G1": g1.satisfied,
        "G2": g21.satisfied and g22.satisfied,
        "U1": g1.strict,
        "U2": g21.strict and g22.satisfied,
        "alpha1_positive": alpha1 > 0,
        "kappa_positive": kappa > 0,
    }
    pot = sc.pot
    constants_out = {
        "L1": {"value": L1, "provenance": L1_tag},
        "theta": {"value": float(theta), "provenance": theta_tag},
        "r": {"value": r, "provenance": "estimated"},
        "psi_third_bound": {"value": float(psi3),
                            "provenance": "smoothed 6(delta+1)" if pot.kind == "smoothed" else "6r"},
    }
    if pot.kind == "smoothed":
        constants_out["delta"] = {"value": float(pot.delta), "provenance": "configured"}
    for name in ("L3", "c_p", "c_q"):
        v, tag = _const(constants, name)
        if v is not None:
            constants_out[name] = {"value": v, "provenance": tag}
    conditions = {"G1": g1, "G2.1": g21, "G2.2": g22}
    return CertificateReport(conditions, constants_out, flags, norms)


def uniqueness_time_bound(kappa: float, L1: float, L3: float, phi_costate_norm: float,
                          c_p: float, c_q: float, h_prime_sup: float) -> float:
    """Largest final time allowed by the small-time uniqueness condition.

    ``(sqrt(3) kappa / (2 (sqrt(2) L1 c_p c_q + L3 ||phi_a|| ||h'||)))^(4/3)``;
    returns ``inf`` when the denominator vanishes.
    """
    if not kappa > 0:
        raise ValueError("nonpositive_kappa: kappa must be positive")
    for name, v in (("L1", L1), ("L3", L3), ("phi_costate_norm", phi_costate_norm),
                    ("c_p", c_p), ("c_q", c_q), ("h_prime_sup", h_prime_sup)):
        if not (np.isfinite(v) and v >= 0):
            raise ValueError(f"{name} must be finite and non-negative")
    denom = 2.0 * (np.sqrt(2.0) * L1 * c_p * c_q + L3 * phi_costate_norm * h_prime_sup)
    if denom == 0.0:
        return float("inf")
    return float((np.sqrt(3.0) * kappa / denom) ** (4.0 / 3.0))


# ---------------------------------------------------------------------------
# constant estimators

def _sample_pair(problem: ControlProblem, rng: np.random.Generator):
    lo, hi = problem.lower, problem.upper
    lo_f = np.where(np.isfinite(lo), lo, -1.0)
    hi_f = np.where(np.isfinite(hi), hi, 1.0)
    u = lo_f + (hi_f - lo_f) * rng.random(lo.shape)
    scale = 10.0 ** rng.uniform(-3, -1)
    v = problem.project(u + scale * (hi_f - lo_f + 1.0) * rng.standard_normal(lo.shape))
    return problem.project(u), v


def estimate_lipschitz(problem: ControlProblem, kind: str = "state", n_pairs: int = 10, seed: int = 0,
                       norm_spec: str = "phi_L2") -> dict:
    """Running maximum of ``||map(u) - map(v)|| / ||u - v||`` over sampled admissible pairs.

    ``kind`` is ``state`` or ``costate``.  ``norm_spec`` selects the output
    norm: ``phi_L2`` or ``phi_Linf`` (phase field only, state) or ``all_L2``
    (every component).  Pair ``i`` is drawn from its own generator, so the
    samples for ``n`` pairs are a prefix of those for ``n + 1`` pairs.
    """
    if kind not in ("state", "costate"):
        raise ValueError(f"unknown map kind {kind!r}")
    if n_pairs < 2:
        raise ValueError("n_pairs must be at least 2")
    sc = problem.scheme
    best, history = 0.0, []
    for i in range(n_pairs):
        rng = np.random.default_rng([seed, i])
        u, v = _sample_pair(problem, rng)
        du = problem.norm(u - v)
        if du == 0.0:
            history.append(best)
            continue
        if kind == "state":
            a_tr, b_tr = sc.solve(u, problem.phi0), sc.solve(v, problem.phi0)
            fields = [(a_tr.phi, b_tr.phi)]
            if norm_spec == "all_L2":
                fields += [(a_tr.mu, b_tr.mu), (a_tr.sigma, b_tr.sigma), (a_tr.vel, b_tr.vel),
                           (a_tr.pressure, b_tr.pressure)]
        else:
            ca = solve_costate(sc.solve(u, problem.phi0), problem.objective)
            cb = solve_costate(sc.solve(v, problem.phi0), problem.objective)
            fields = [(ca.phi_a, cb.phi_a)]
            if norm_spec == "all_L2":
                fields += [(ca.tau, cb.tau), (ca.rho, cb.rho), (ca.w, cb.w), (ca.q, cb.q)]
        if norm_spec == "phi_Linf":
            num = max(space_time_norm(sc, x - y, "Linf") for x, y in fields)
        elif norm_spec in ("phi_L2", "all_L2"):
            num = np.sqrt(sum(space_time_norm(sc, x - y, "L2") ** 2 for x, y in fields))
        else:
            raise ValueError(f"unknown norm_spec {norm_spec!r}")
        best = max(best, float(num / du))
        history.append(best)
    return {"value": best, "label": "estimated lower bound", "kind": kind, "norm": norm_spec,
            "n_pairs": n_pairs, "seed": seed, "running_max": history}


def estimate_sobolev_constant(grid: StructuredGrid, p: float, n_starts: int = 20, seed: int = 0,
                              max_iter: int = 500, tol: float = 1e-13) -> dict:
    """Largest sampled value of ``||v||_Lp / ||v||_H1`` over nodal fields.

    Ascent uses the nonlinear power iteration ``v <- H^{-1} grad ||v||_p``
    followed by renormalization to the unit ``H1`` sphere (``H = M_L + K``);
    for a convex numerator each step does not decrease the quotient.  The
    constant field is always included as a start.
    """
    if not 1 <= p <= 6:
        raise ValueError("invalid_p: p must lie in [1, 6]")
    mL = np.asarray(lumped_mass(grid))
    H = (sp.diags(mL) + assemble_stiffness_neumann(grid)).tocsc()
    lu = spla.splu(H)

    def h1(v):
        return float(np.sqrt(v @ (H @ v)))

    def lp(v):
        return float(np.dot(mL, np.abs(v) ** p) ** (1.0 / p))

    rng = np.random.default_rng(seed)
    starts = [np.ones(grid.n_nodes)] + [rng.standard_normal(grid.n_nodes) for _ in range(n_starts)]
    best, values = 0.0, []
    for v in starts:
        v = v / h1(v)
        q = lp(v)
        for _ in range(max_iter):
            grad = mL * np.sign(v) * np.abs(v) ** (p - 1)
            w = lu.solve(grad)
            w /= h1(w)
            q_new = lp(w)
            if q_new < q:
                break
            v, done = w, q_new - q <= tol * q_new
            q = q_new
            if done:
                break
        values.append(q)
        best = max(best, q)
    return {"value": best, "label": "estimated lower bound", "p": p, "n_starts": n_starts,
            "seed": seed, "per_start": values}

