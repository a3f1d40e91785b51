"""Linearization of the discrete state scheme around a base trajectory.

The tangent step is the exact derivative of one forward step in
``stabilized_linear`` mode, with the same splitting order and operators.
Right-hand sides ``F1..F4, Fvec`` enter the equations for level ``k`` as

* ``F1``  extra divergence data,          ``div v = ... + F1``
* ``F2``  extra phase source,             ``dt phi_t + ... = ... + F2``
* ``F3``  extra chemical potential term,  ``mu = ... + F3``
* ``F4``  extra nutrient source,          ``-lap sigma + ... = F4``
* ``Fvec`` extra momentum forcing.

Index ``k`` of every RHS array refers to the equations that produce level
``k``; ``F2[0]`` is unused because the initial phase field is fixed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .state import Scheme, Trajectory

__all__ = [
    "LinearizedRHS",
    "LinearizedSolution",
    "require_differentiable",
    "solve_linearized",
    "frechet_state",
]


@dataclass
class LinearizedRHS:
    F1: np.ndarray   # (n_steps + 1, n_nodes)
    F2: np.ndarray
    F3: np.ndarray
    F4: np.ndarray
    Fvec: np.ndarray  # (n_steps + 1, 2, n_nodes)

    @classmethod
    def zeros(cls, n_levels: int, n_nodes: int) -> "LinearizedRHS":
        z = np.zeros((n_levels, n_nodes))
        return cls(z.copy(), z.copy(), z.copy(), z.copy(), np.zeros((n_levels, 2, n_nodes)))

    @classmethod
    def random(cls, rng: np.random.Generator, n_levels: int, n_nodes: int) -> "LinearizedRHS":
        s = (n_levels, n_nodes)
        return cls(rng.standard_normal(s), rng.standard_normal(s), rng.standard_normal(s),
                   rng.standard_normal(s), rng.standard_normal((n_levels, 2, n_nodes)))

    def scaled(self, alpha: float) -> "LinearizedRHS":
        return LinearizedRHS(alpha * self.F1, alpha * self.F2, alpha * self.F3, alpha * self.F4,
                             alpha * self.Fvec)

    def check(self, base: Trajectory) -> "LinearizedRHS":
        s = base.phi.shape
        for name in ("F1", "F2", "F3", "F4"):
            a = getattr(self, name)
            if a.shape != s or not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite with shape {s}")
        if self.Fvec.shape != base.vel.shape or not np.all(np.isfinite(self.Fvec)):
            raise ValueError(f"Fvec must be finite with shape {base.vel.shape}")
        return self

    def norm(self, base: Trajectory) -> float:
        mL, dt = base.scheme.mL, base.dt
        tot = sum(np.sum(mL * getattr(self, k) ** 2) for k in ("F1", "F2", "F3", "F4"))
        tot += np.sum(mL * self.Fvec ** 2)
        return float(np.sqrt(dt * tot))


class LinearizedSolution(Trajectory):
    """Tangent fields ``(phi, mu, sigma, v, p)`` per level; ``phi[0] = 0``."""

    def __init__(self, scheme, control, phi, mu, sigma, vel, pressure):
        super().__init__(scheme, control, phi, mu, sigma, vel, pressure, {}, "linearized")


def require_differentiable(scheme: Scheme) -> None:
    """Derivatives are implemented only for the stabilized linear scheme without upwinding."""
    if scheme.opts.nonlinear_mode != "stabilized_linear":
        raise ValueError("derivatives require nonlinear_mode 'stabilized_linear'")
    if scheme.opts.upwind:
        raise ValueError("derivatives are not available with upwind diffusion")


def _vp_solve(scheme: Scheme, rhs_v: np.ndarray, rhs_p: np.ndarray):
    n = scheme.n
    sol = scheme.brinkman.solve(np.concatenate([rhs_v[0], rhs_v[1], rhs_p]))
    return sol[: 2 * n].reshape(2, n), sol[2 * n:]


def solve_linearized(base: Trajectory, rhs: LinearizedRHS, h_dir: np.ndarray | None = None
                     ) -> LinearizedSolution:
    """Step the tangent scheme forward from a zero initial phase perturbation.

    ``h_dir`` is an optional control direction (one slice per interval); it
    is equivalent to ``F2[k] = -h_dir[k-1] * h(phi^{k-1})``.
    """
    sc = base.scheme
    require_differentiable(sc)
    rhs.check(base)
    p = sc.params
    P, A, chi, S, dt = p.proliferation_P, p.apoptosis_A, p.chemotaxis_chi, sc.opts.stabilization_S, sc.dt
    mL, n, N = sc.mL, sc.n, base.n_steps
    vel_on = sc.opts.velocity_enabled
    if h_dir is not None:
        h_dir = np.asarray(getattr(h_dir, "values", h_dir), dtype=float)
        if h_dir.shape != sc.control_shape():
            raise ValueError(f"direction has shape {h_dir.shape}, expected {sc.control_shape()}")

    dphi = np.zeros((N + 1, n))
    dmu = np.zeros_like(dphi)
    dsig = np.zeros_like(dphi)
    dvel = np.zeros((N + 1, 2, n))
    dpres = np.zeros_like(dphi)

    # level 0: the phase field is fixed, the remaining fields follow it
    phi0 = base.phi[0]
    dsig[0] = sc.nutrient_solver(phi0).solve(mL * rhs.F4[0])
    dmu[0] = -chi * dsig[0] + rhs.F3[0]
    if vel_on:
        f = sc.forcing(dmu[0] + chi * dsig[0], phi0) + mL * rhs.Fvec[0]
        g = -mL * (P * sc.h(phi0) * dsig[0] + rhs.F1[0])
        dvel[0], dpres[0] = _vp_solve(sc, f, g)

    for k in range(1, N + 1):
        phi_o, mu_o = base.phi[k - 1], base.mu[k - 1]
        sig, vel, u = base.sigma[k], base.vel[k], base.control[k - 1]
        dphi_o, dmu_o = dphi[k - 1], dmu[k - 1]
        h0, h1 = sc.h(phi_o), sc.h(phi_o, 1)

        ds = sc.nutrient_solver(phi_o).solve(-mL * h1 * sig * dphi_o + mL * rhs.F4[k])

        if vel_on:
            f = (sc.forcing(dmu_o + chi * ds, phi_o) + sc.forcing(mu_o + chi * sig, dphi_o)
                 + mL * rhs.Fvec[k])
            g = -mL * (P * h0 * ds + (P * sig - A) * h1 * dphi_o + rhs.F1[k])
            dv, dp = _vp_solve(sc, f, g)
        else:
            dv, dp = np.zeros((2, n)), np.zeros(n)

        src = P * ds * h0 + (P * sig - A - u) * h1 * dphi_o + rhs.F2[k]
        if h_dir is not None:
            src = src - h_dir[k - 1] * h0
        r_phi = mL * dphi_o + dt * mL * src
        if vel_on:
            r_phi = r_phi - dt * (sc.conv(dphi_o, vel) + sc.conv(phi_o, dv))
        r_mu = mL * ((sc.pot(phi_o, 2) - S) * dphi_o - chi * ds + rhs.F3[k])
        sol = sc.ch.solve(np.concatenate([r_phi, r_mu]))
        dphi[k], dmu[k], dsig[k], dvel[k], dpres[k] = sol[:n], sol[n:], ds, dv, dp

    ctrl = np.zeros(sc.control_shape()) if h_dir is None else h_dir.copy()
    return LinearizedSolution(sc, ctrl, dphi, dmu, dsig, dvel, dpres)


def frechet_state(base: Trajectory, h_dir) -> LinearizedSolution:
    """Derivative of the control-to-state map at ``base.control`` in direction ``h_dir``."""
    sc = base.scheme
    h_dir = np.asarray(getattr(h_dir, "values", h_dir), dtype=float)
    if h_dir.shape != sc.control_shape():
        raise ValueError(f"direction has shape {h_dir.shape}, expected {sc.control_shape()}")
    rhs = LinearizedRHS.zeros(base.n_steps + 1, sc.n)
    rhs.F2[1:] = -h_dir * sc.h(base.phi[:-1])
    sol = solve_linearized(base, rhs)
    sol.control = h_dir.copy()
    return sol
