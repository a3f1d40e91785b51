"""Discrete adjoint of the state scheme.

The backward sweep applies the transpose of the tangent step, so that for
any tangent data ``F`` and adjoint data ``G`` the pairing identity

    ell_G(delta y) = -sum_k lambda_k . r_k(F)

holds to round-off.  Here ``ell_G`` is the linear functional

    <G0, dphi_N> + sum_k w_k [<G1, dphi> + <G2, dmu> - <G3, dsigma>
                              + <Gvec1, dv> - <Gvec2, grad dphi>]_k

with trapezoidal weights ``w_k`` and lumped-mass inner products, and
``lambda_k`` are the raw multipliers of the step equations.  The costate
fields are rescaled multipliers::

    phi_a = -lam_phi,  tau = -lam_mu / dt,  rho = -lam_sigma / dt,
    w = -lam_v / dt,   q = -lam_p / dt

where snapshot ``n < N`` is read from the multipliers of step ``n + 1`` and
snapshot ``N`` holds the terminal datum ``phi_a = G0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sensitivity import LinearizedRHS, LinearizedSolution, require_differentiable
from .state import Scheme, Trajectory

__all__ = [
    "AdjointRHS",
    "CostateSnapshot",
    "CostateTrajectory",
    "time_weights",
    "solve_adjoint_general",
    "solve_costate",
    "frechet_costate",
    "pairing",
    "multiplier_pairing",
]


def time_weights(n_steps: int, dt: float) -> np.ndarray:
    """Trapezoidal weights on the time levels ``0..n_steps``."""
    w = np.full(n_steps + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


@dataclass
class AdjointRHS:
    G0: np.ndarray     # (n_nodes,)
    G1: np.ndarray     # (n_steps + 1, n_nodes)
    G2: np.ndarray
    G3: np.ndarray
    Gvec1: np.ndarray  # (n_steps + 1, 2, n_nodes)
    Gvec2: np.ndarray

    @classmethod
    def zeros(cls, n_levels: int, n_nodes: int) -> "AdjointRHS":
        z = np.zeros((n_levels, n_nodes))
        zv = np.zeros((n_levels, 2, n_nodes))
        return cls(np.zeros(n_nodes), z.copy(), z.copy(), z.copy(), zv.copy(), zv.copy())

    @classmethod
    def random(cls, rng: np.random.Generator, n_levels: int, n_nodes: int) -> "AdjointRHS":
        s, sv = (n_levels, n_nodes), (n_levels, 2, n_nodes)
        return cls(rng.standard_normal(n_nodes), rng.standard_normal(s), rng.standard_normal(s),
                   rng.standard_normal(s), rng.standard_normal(sv), rng.standard_normal(sv))

    def scaled(self, alpha: float) -> "AdjointRHS":
        return AdjointRHS(*(alpha * getattr(self, k) for k in ("G0", "G1", "G2", "G3", "Gvec1", "Gvec2")))

    def check(self, base: Trajectory) -> "AdjointRHS":
        shapes = {"G0": base.phi.shape[1:], "G1": base.phi.shape, "G2": base.phi.shape,
                  "G3": base.phi.shape, "Gvec1": base.vel.shape, "Gvec2": base.vel.shape}
        for name, s in shapes.items():
            a = getattr(self, name)
            if a.shape != s or not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite with shape {s}")
        return self

    def norm(self, base: Trajectory) -> float:
        mL, dt = base.scheme.mL, base.dt
        tot = sum(np.sum(mL * getattr(self, k) ** 2) for k in ("G1", "G2", "G3", "Gvec1", "Gvec2"))
        return float(np.sqrt(np.sum(mL * self.G0 ** 2) + dt * tot))


@dataclass(frozen=True)
class CostateSnapshot:
    phi_a: np.ndarray
    tau: np.ndarray
    rho: np.ndarray
    w: np.ndarray
    q: np.ndarray


@dataclass
class CostateTrajectory:
    base: Trajectory
    phi_a: np.ndarray   # (n_steps + 1, n_nodes)
    tau: np.ndarray
    rho: np.ndarray
    w: np.ndarray       # (n_steps + 1, 2, n_nodes)
    q: np.ndarray
    multipliers: dict = field(default_factory=dict, repr=False)
    diagnostics: dict = field(default_factory=dict)
    kind: str = "costate"

    @property
    def n_steps(self) -> int:
        return self.phi_a.shape[0] - 1

    def __len__(self):
        return self.n_steps + 1

    def snapshot(self, n: int) -> CostateSnapshot:
        return CostateSnapshot(self.phi_a[n], self.tau[n], self.rho[n], self.w[n], self.q[n])

    def norm(self) -> float:
        """Discrete ``L2(L2)`` norm over all costate components."""
        sc = self.base.scheme
        wts = time_weights(self.n_steps, sc.dt)
        tot = 0.0
        for a in (self.phi_a, self.tau, self.rho, self.q):
            tot += np.sum(wts * (a ** 2 @ sc.mL))
        tot += np.sum(wts * ((self.w[:, 0] ** 2 + self.w[:, 1] ** 2) @ sc.mL))
        return float(np.sqrt(tot))


# ---------------------------------------------------------------------------
# pairings

def _grad_T(sc: Scheme, vec: np.ndarray) -> np.ndarray:
    """Nodal representation of ``phi -> int vec . grad phi``."""
    g = sc.grid
    return g.scatter(g.gather(vec[0]), "dx") + g.scatter(g.gather(vec[1]), "dy")


def pairing(sol: Trajectory, rhs: AdjointRHS) -> float:
    """Evaluate the functional ``ell_G`` on a tangent solution."""
    sc = sol.scheme
    mL = sc.mL
    wts = time_weights(sol.n_steps, sc.dt)
    total = float(mL @ (rhs.G0 * sol.phi[-1]))
    for k in range(sol.n_steps + 1):
        term = (mL @ (rhs.G1[k] * sol.phi[k] + rhs.G2[k] * sol.mu[k] - rhs.G3[k] * sol.sigma[k])
                + mL @ (rhs.Gvec1[k, 0] * sol.vel[k, 0] + rhs.Gvec1[k, 1] * sol.vel[k, 1])
                - sol.phi[k] @ _grad_T(sc, rhs.Gvec2[k]))
        total += wts[k] * term
    return float(total)


def multiplier_pairing(costate: CostateTrajectory, rhs: LinearizedRHS, h_dir=None) -> float:
    """``-sum_k lambda_k . r_k(F)`` including an optional control direction."""
    base = costate.base
    sc = base.scheme
    mL, dt = sc.mL, sc.dt
    lam = costate.multipliers
    total = 0.0
    for k in range(base.n_steps + 1):
        r_sig = mL * rhs.F4[k]
        r_mu = mL * rhs.F3[k]
        r_v = mL * rhs.Fvec[k]
        r_p = -mL * rhs.F1[k]
        r_phi = dt * mL * rhs.F2[k] if k > 0 else 0.0 * r_mu
        if h_dir is not None and k > 0:
            r_phi = r_phi - dt * mL * np.asarray(getattr(h_dir, "values", h_dir))[k - 1] * sc.h(base.phi[k - 1])
        total -= (lam["sigma"][k] @ r_sig + lam["mu"][k] @ r_mu + lam["p"][k] @ r_p
                  + lam["v"][k, 0] @ r_v[0] + lam["v"][k, 1] @ r_v[1] + lam["phi"][k] @ r_phi)
    return float(total)


# ---------------------------------------------------------------------------
# backward sweep

def _level_source(sc: Scheme, rhs: AdjointRHS, k: int, wk: float, terminal: bool):
    """Gradient of ``ell_G`` with respect to the fields of level ``k``."""
    mL = sc.mL
    s_phi = wk * (mL * rhs.G1[k] - _grad_T(sc, rhs.Gvec2[k]))
    if terminal:
        s_phi = s_phi + mL * rhs.G0
    return {"phi": s_phi, "mu": wk * mL * rhs.G2[k], "sigma": -wk * mL * rhs.G3[k],
            "v": wk * mL * rhs.Gvec1[k], "p": np.zeros(sc.n)}


def _old_transpose(sc: Scheme, base: Trajectory, k: int, lam: dict):
    """Transpose of the old-level Jacobian of step ``k`` applied to its multipliers.

    Returns the contributions to the ``phi`` and ``mu`` rows of level ``k - 1``.
    """
    p = sc.params
    P, A, chi, S, dt = p.proliferation_P, p.apoptosis_A, p.chemotaxis_chi, sc.opts.stabilization_S, sc.dt
    mL = sc.mL
    phi_o, mu_o = base.phi[k - 1], base.mu[k - 1]
    sig, vel, u = base.sigma[k], base.vel[k], base.control[k - 1]
    h1 = sc.h(phi_o, 1)
    l_s, l_v, l_p, l_f, l_m = lam["sigma"][k], lam["v"][k], lam["p"][k], lam["phi"][k], lam["mu"][k]
    out_phi = (mL * h1 * sig * l_s - mL * l_f - dt * mL * (P * sig - A - u) * h1 * l_f
               - mL * (sc.pot(phi_o, 2) - S) * l_m)
    out_mu = np.zeros(sc.n)
    if sc.opts.velocity_enabled:
        out_phi += (-sc.forcing_T_phi(mu_o + chi * sig, l_v) + mL * (P * sig - A) * h1 * l_p
                    + dt * sc.conv_T_phi(vel, l_f))
        out_mu = -sc.forcing_T_c(phi_o, l_v)
    return out_phi, out_mu


def _backward(base: Trajectory, source) -> dict:
    """Backward sweep; ``source(k)`` returns the level-``k`` right-hand side pieces.

    Each level solves ``J_new^T lam_k = -source_k - J_old_{k+1}^T lam_{k+1}``.
    """
    sc = base.scheme
    p = sc.params
    P, chi, dt = p.proliferation_P, p.chemotaxis_chi, sc.dt
    mL, n, N = sc.mL, sc.n, base.n_steps
    vel_on = sc.opts.velocity_enabled
    lam = {"phi": np.zeros((N + 1, n)), "mu": np.zeros((N + 1, n)), "sigma": np.zeros((N + 1, n)),
           "v": np.zeros((N + 1, 2, n)), "p": np.zeros((N + 1, n))}
    div_res = np.zeros(N + 1)

    carry_phi, carry_mu = np.zeros(n), np.zeros(n)
    for k in range(N, -1, -1):
        src = source(k)
        b_phi = -src["phi"] - carry_phi
        b_mu = -src["mu"] - carry_mu
        b_sig, b_v, b_p = -src["sigma"], -src["v"], -src["p"]
        phi_o = base.phi[k - 1] if k > 0 else base.phi[0]
        h0 = sc.h(phi_o)

        if k > 0:
            sol = sc.ch.solve(np.concatenate([b_phi, b_mu]), trans=True)
            l_f, l_m = sol[:n], sol[n:]
            if vel_on:
                b_v = b_v - dt * sc.conv_T_v(phi_o, l_f)
            b_sig = b_sig + dt * mL * P * h0 * l_f - chi * mL * l_m
        else:
            # level 0: the phase row is absent and mu has a lumped-mass row
            l_f = np.zeros(n)
            l_m = None

        if vel_on:
            rhs_vp = np.concatenate([b_v[0], b_v[1], b_p])
            solvp = sc.brinkman.solve(rhs_vp, trans=True)
            l_v, l_p = solvp[: 2 * n].reshape(2, n), solvp[2 * n:]
            div_res[k] = _constraint_residual(sc, solvp, rhs_vp)
        else:
            l_v, l_p = np.zeros((2, n)), np.zeros(n)

        if k == 0:
            # mu^0 row: M_L dmu - forcing(dmu, phi0) coupling into the Brinkman rows
            b_mu0 = b_mu + (sc.forcing_T_c(phi_o, l_v) if vel_on else 0.0)
            l_m = b_mu0 / mL
        b_sig = b_sig + (chi * sc.forcing_T_c(phi_o, l_v) - mL * P * h0 * l_p if vel_on else 0.0)
        if k == 0:
            b_sig = b_sig - chi * mL * l_m
        l_s = sc.nutrient_solver(phi_o).solve(b_sig)

        lam["phi"][k], lam["mu"][k], lam["sigma"][k], lam["v"][k], lam["p"][k] = l_f, l_m, l_s, l_v, l_p
        if k > 0:
            carry_phi, carry_mu = _old_transpose(sc, base, k, lam)
    return {"lam": lam, "divergence_residual": div_res}


def _constraint_residual(sc: Scheme, sol: np.ndarray, rhs: np.ndarray) -> float:
    n = sc.n
    BT = sc.brinkman_matrix.T.tocsr()[2 * n:]
    r = BT @ sol - rhs[2 * n:]
    scale = max(np.linalg.norm(rhs), np.linalg.norm(BT @ sol), np.finfo(float).tiny)
    return float(np.linalg.norm(r) / scale)


def _costate_from_multipliers(base: Trajectory, lam: dict, G0: np.ndarray, diag: dict) -> CostateTrajectory:
    dt, N = base.dt, base.n_steps
    n = base.scheme.n
    phi_a = np.zeros((N + 1, n))
    tau, rho, q = np.zeros_like(phi_a), np.zeros_like(phi_a), np.zeros_like(phi_a)
    w = np.zeros((N + 1, 2, n))
    phi_a[:N] = -lam["phi"][1:]
    tau[:N] = -lam["mu"][1:] / dt
    rho[:N] = -lam["sigma"][1:] / dt
    w[:N] = -lam["v"][1:] / dt
    q[:N] = -lam["p"][1:] / dt
    phi_a[N] = G0
    return CostateTrajectory(base, phi_a, tau, rho, w, q, lam, diag)


def solve_adjoint_general(base: Trajectory, rhs: AdjointRHS) -> CostateTrajectory:
    """Backward solve of the adjoint system for general data ``G``."""
    sc = base.scheme
    require_differentiable(sc)
    rhs.check(base)
    wts = time_weights(base.n_steps, sc.dt)
    N = base.n_steps
    out = _backward(base, lambda k: _level_source(sc, rhs, k, wts[k], k == N))
    return _costate_from_multipliers(base, out["lam"], rhs.G0,
                                     {"divergence_residual": out["divergence_residual"]})


def costate_rhs(base: Trajectory, objective) -> AdjointRHS:
    """Adjoint data of the tracking cost: ``G0 = a0 (phi_N - phi_f)``, ``G1 = a1 (phi - phi_d)``."""
    n_levels, n = base.phi.shape
    rhs = AdjointRHS.zeros(n_levels, n)
    rhs.G0 = objective.alpha0 * (base.phi[-1] - objective.phi_f_nodal(n))
    rhs.G1 = objective.alpha1 * (base.phi - objective.phi_d_nodal(n_levels, n))
    return rhs


def solve_costate(base: Trajectory, objective) -> CostateTrajectory:
    return solve_adjoint_general(base, costate_rhs(base, objective))


def frechet_costate(base: Trajectory, h_dir, costate: CostateTrajectory, lin: LinearizedSolution,
                    objective) -> CostateTrajectory:
    """Derivative of the control-to-costate map in direction ``h_dir``.

    Differentiates the discrete backward sweep: the right-hand side collects
    the cost Hessian applied to ``lin`` and the second derivatives of the
    step residuals contracted with the costate multipliers.
    """
    sc = base.scheme
    require_differentiable(sc)
    h_dir = np.asarray(getattr(h_dir, "values", h_dir), dtype=float)
    p = sc.params
    P, A, chi, dt = p.proliferation_P, p.apoptosis_A, p.chemotaxis_chi, sc.dt
    mL, n, N = sc.mL, sc.n, base.n_steps
    vel_on = sc.opts.velocity_enabled
    wts = time_weights(N, dt)
    lam = costate.multipliers

    def source(k):
        s = {"phi": objective.alpha1 * wts[k] * mL * lin.phi[k], "mu": np.zeros(n),
             "sigma": np.zeros(n), "v": np.zeros((2, n)), "p": np.zeros(n)}
        if k == N:
            s["phi"] = s["phi"] + objective.alpha0 * mL * lin.phi[N]
        if k >= 1:
            # step k, derivative of J_new^T lam_k through phi^{k-1}
            phi_o, dphi_o = base.phi[k - 1], lin.phi[k - 1]
            h1 = sc.h(phi_o, 1)
            l_s, l_v, l_p, l_f = lam["sigma"][k], lam["v"][k], lam["p"][k], lam["phi"][k]
            s["sigma"] = s["sigma"] + mL * h1 * dphi_o * l_s - dt * mL * P * h1 * dphi_o * l_f
            if vel_on:
                s["sigma"] = s["sigma"] - chi * sc.forcing_T_c(dphi_o, l_v) + mL * P * h1 * dphi_o * l_p
                s["v"] = s["v"] + dt * sc.conv_T_v(dphi_o, l_f)
        if k < N:
            # step k + 1, derivative of J_old^T lam_{k+1}
            j = k + 1
            phi_o = base.phi[k]
            sig, u = base.sigma[j], base.control[k]
            dphi_o, dmu_o, dsig, dvel, du = lin.phi[k], lin.mu[k], lin.sigma[j], lin.vel[j], h_dir[k]
            h1, h2 = sc.h(phi_o, 1), sc.h(phi_o, 2)
            l_s, l_v, l_p, l_f, l_m = lam["sigma"][j], lam["v"][j], lam["p"][j], lam["phi"][j], lam["mu"][j]
            hp = (mL * l_s * (h1 * dsig + h2 * sig * dphi_o)
                  + mL * l_f * dt * (-P * h1 * dsig + h1 * du - (P * sig - A - u) * h2 * dphi_o)
                  - mL * l_m * sc.pot(phi_o, 3) * dphi_o)
            if vel_on:
                hp += (-sc.forcing_T_phi(dmu_o + chi * dsig, l_v)
                       + mL * l_p * (P * h1 * dsig + (P * sig - A) * h2 * dphi_o)
                       + dt * sc.conv_T_phi(dvel, l_f))
                s["mu"] = s["mu"] - sc.forcing_T_c(dphi_o, l_v)
            s["phi"] = s["phi"] + hp
        return s

    out = _backward(base, source)
    return _costate_from_multipliers(base, out["lam"], objective.alpha0 * lin.phi[N],
                                     {"divergence_residual": out["divergence_residual"]})
