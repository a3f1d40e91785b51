"""Time stepping of the Cahn-Hilliard-Brinkman tumour model.

One step ``n -> n+1`` runs three solves in order:

1. nutrient   ``(K + M_L (h(phi^n) + b)) sigma = b M_L sigma_B``
2. Brinkman   stabilized ``(v, p)`` with forcing ``(mu^n + chi sigma) grad phi^n``
              and divergence data ``(P sigma - A) h(phi^n)`` (skipped in
              reduced mode, where ``v = 0``)
3. Cahn-Hilliard in mixed form::

       M_L (phi - phi^n) + dt [C(phi^n, v) + m K mu] = dt M_L (P sigma - A - u_n) h(phi^n)
       M_L mu = K phi + M_L (psi'(phi^n) + S (phi - phi^n) - chi sigma)

   where ``C(phi, v)`` is the weak form of ``div(phi v)``.  Newton mode
   replaces the stabilized term by an implicit ``psi'(phi)``.

``M_L`` is the lumped mass.  The step residual is written so that its
Jacobians are used verbatim by the tangent and adjoint solvers.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .linalg import Factorized, SolverDivergence, relative_residual
from .mesh import (StructuredGrid, assemble_brinkman_operator, assemble_stiffness_neumann,
                   default_pressure_stabilization, lumped_mass)
from .model import InterpolationH, ModelParams, Potential

log = logging.getLogger(__name__)

__all__ = [
    "SolverOptions",
    "StateSnapshot",
    "Trajectory",
    "Scheme",
    "solve_nutrient",
    "solve_brinkman",
    "ch_step",
    "solve_state",
    "energy",
]


@dataclass(frozen=True)
class SolverOptions:
    dt: float
    stabilization_S: float = 2.0
    nonlinear_mode: str = "stabilized_linear"
    newton_max_iter: int = 25
    newton_tol: float = 1e-10
    linear_tol: float = 1e-10
    velocity_enabled: bool = True
    linear_solver: str = "direct"
    upwind: bool = False
    pressure_stabilization: float | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.linear_tol <= 1e-4:
            raise ValueError("linear_tol must lie in (0, 1e-4]")
        if self.stabilization_S < 0:
            raise ValueError("stabilization_S must be non-negative")
        if self.nonlinear_mode not in ("stabilized_linear", "newton"):
            raise ValueError(f"unknown nonlinear_mode {self.nonlinear_mode!r}")
        if self.linear_solver not in ("direct", "krylov"):
            raise ValueError(f"unknown linear_solver {self.linear_solver!r}")

    def n_steps(self, T: float) -> int:
        n = int(round(T / self.dt))
        if n < 1 or abs(n * self.dt - T) > 1e-9 * max(1.0, T):
            raise ValueError(f"final time {T} is not a multiple of dt {self.dt}")
        return n


@dataclass(frozen=True)
class StateSnapshot:
    phi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    vel: np.ndarray
    pressure: np.ndarray

    def __post_init__(self):
        for name in ("phi", "mu", "sigma", "vel", "pressure"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise SolverDivergence(f"non-finite {name} in state snapshot")


@dataclass
class Trajectory:
    """All time levels of one forward solve (index 0 is the initial state)."""

    scheme: "Scheme"
    control: np.ndarray          # (n_steps, n_nodes), one slice per time interval
    phi: np.ndarray              # (n_steps + 1, n_nodes)
    mu: np.ndarray
    sigma: np.ndarray
    vel: np.ndarray              # (n_steps + 1, 2, n_nodes)
    pressure: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    kind: str = "state"

    @property
    def grid(self) -> StructuredGrid:
        return self.scheme.grid

    @property
    def dt(self) -> float:
        return self.scheme.dt

    @property
    def n_steps(self) -> int:
        return self.phi.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def __len__(self):
        return self.n_steps + 1

    def snapshot(self, n: int) -> StateSnapshot:
        return StateSnapshot(self.phi[n], self.mu[n], self.sigma[n], self.vel[n], self.pressure[n])

    def timeseries(self) -> np.ndarray:
        """Rows ``t, mass(phi), E(phi), ||v||_L2, min sigma, max sigma``."""
        mL = self.scheme.mL
        rows = []
        for n in range(self.n_steps + 1):
            vnorm = np.sqrt(np.dot(mL, self.vel[n, 0] ** 2 + self.vel[n, 1] ** 2))
            rows.append([self.times[n], float(mL @ self.phi[n]), self.scheme.energy(self.phi[n]),
                         float(vnorm), float(self.sigma[n].min()), float(self.sigma[n].max())])
        return np.array(rows)


class Scheme:
    """Assembled operators and the per-step solves of the state system."""

    def __init__(self, grid: StructuredGrid, params: ModelParams, h: InterpolationH,
                 pot: Potential, opts: SolverOptions):
        self.grid = grid
        self.params = params
        self.h = h
        self.pot = pot
        self.opts = opts
        self.dt = opts.dt
        self.n_steps = opts.n_steps(params.final_time_T)
        self.n = grid.n_nodes
        self.K = assemble_stiffness_neumann(grid)
        self.mL = np.asarray(lumped_mass(grid))
        self.ML = sp.diags(self.mL).tocsr()
        self.sigma_B = params.sigma_B_nodal(self.n)
        self.gamma = (default_pressure_stabilization(grid, params.shear_eta)
                      if opts.pressure_stabilization is None else opts.pressure_stabilization)
        self._brinkman = None
        self._ch = None

    # -- operators ------------------------------------------------------------

    @property
    def brinkman_matrix(self) -> sp.csr_matrix:
        return self.brinkman.A.tocsr()

    @property
    def brinkman(self) -> Factorized:
        if self._brinkman is None:
            B = assemble_brinkman_operator(self.grid, self.params, self.gamma)
            self._brinkman = Factorized(B, self.opts.linear_solver, symmetric=False,
                                        tol=self.opts.linear_tol)
        return self._brinkman

    @property
    def ch(self) -> Factorized:
        """Mixed Cahn-Hilliard matrix of the stabilized linear scheme."""
        if self._ch is None:
            self._ch = Factorized(self.ch_matrix(), self.opts.linear_solver, tol=self.opts.linear_tol)
        return self._ch

    def ch_matrix(self, psi2: np.ndarray | None = None) -> sp.csr_matrix:
        dt, m = self.dt, self.params.mobility_m
        if psi2 is None:
            lower = -self.K - self.opts.stabilization_S * self.ML
        else:
            lower = -self.K - sp.diags(self.mL * psi2)
        return sp.bmat([[self.ML, dt * m * self.K], [lower, self.ML]]).tocsr()

    def nutrient_matrix(self, phi: np.ndarray) -> sp.csr_matrix:
        b = self.params.nutrient_b
        return (self.K + sp.diags(self.mL * (self.h(phi) + b))).tocsr()

    def nutrient_solver(self, phi: np.ndarray) -> Factorized:
        return Factorized(self.nutrient_matrix(phi), self.opts.linear_solver, symmetric=True,
                          tol=self.opts.linear_tol)

    def energy(self, phi: np.ndarray) -> float:
        return energy(self.grid, phi, self.pot)

    # -- quadrature forms -------------------------------------------------------

    def forcing(self, c, phi):
        """``int c grad(phi) . w`` for both components of the test field ``w``."""
        g = self.grid
        cq = g.gather(c)
        return np.stack([g.scatter(cq * g.gather(phi, "dx")), g.scatter(cq * g.gather(phi, "dy"))])

    def forcing_T_phi(self, c, lv):
        """Transpose of ``forcing`` in its ``phi`` argument, applied to ``lv``."""
        g = self.grid
        cq = g.gather(c)
        return g.scatter(cq * g.gather(lv[0]), "dx") + g.scatter(cq * g.gather(lv[1]), "dy")

    def forcing_T_c(self, phi, lv):
        """Transpose of ``forcing`` in its ``c`` argument, applied to ``lv``."""
        g = self.grid
        return g.scatter(g.gather(phi, "dx") * g.gather(lv[0]) + g.gather(phi, "dy") * g.gather(lv[1]))

    def conv(self, phi, v):
        """Weak ``div(phi v)`` tested with the basis: ``int (v . grad phi + phi div v) test``."""
        g = self.grid
        val = (g.gather(v[0]) * g.gather(phi, "dx") + g.gather(v[1]) * g.gather(phi, "dy")
               + g.gather(phi) * (g.gather(v[0], "dx") + g.gather(v[1], "dy")))
        return g.scatter(val)

    def conv_T_v(self, phi, lam):
        g = self.grid
        lq = g.gather(lam)
        pq = g.gather(phi) * lq
        return np.stack([g.scatter(g.gather(phi, "dx") * lq) + g.scatter(pq, "dx"),
                         g.scatter(g.gather(phi, "dy") * lq) + g.scatter(pq, "dy")])

    def conv_T_phi(self, v, lam):
        g = self.grid
        lq = g.gather(lam)
        div = g.gather(v[0], "dx") + g.gather(v[1], "dy")
        return (g.scatter(g.gather(v[0]) * lq, "dx") + g.scatter(g.gather(v[1]) * lq, "dy")
                + g.scatter(div * lq))

    def upwind_diffusion(self, phi, v):
        """First-order artificial diffusion ``int (h |v| / 2) grad phi . grad test``."""
        g = self.grid
        speed = np.sqrt(g.gather(v[0]) ** 2 + g.gather(v[1]) ** 2)
        nu = 0.5 * g.h * speed
        return g.scatter(nu * g.gather(phi, "dx"), "dx") + g.scatter(nu * g.gather(phi, "dy"), "dy")

    # -- forward solves ---------------------------------------------------------

    def solve_nutrient(self, phi: np.ndarray) -> np.ndarray:
        rhs = self.params.nutrient_b * self.mL * self.sigma_B
        A = self.nutrient_matrix(phi)
        sigma = self.nutrient_solver(phi).solve(rhs)
        if relative_residual(A, sigma, rhs) > 10 * self.opts.linear_tol:
            raise SolverDivergence("nutrient solve missed tolerance")
        return sigma

    def brinkman_rhs(self, phi, mu, sigma):
        P, A, chi = self.params.proliferation_P, self.params.apoptosis_A, self.params.chemotaxis_chi
        f = self.forcing(mu + chi * sigma, phi)
        g = (P * sigma - A) * self.h(phi)
        return np.concatenate([f[0], f[1], -self.mL * g])

    def solve_brinkman(self, phi, mu, sigma, rhs=None):
        n = self.n
        if rhs is None:
            rhs = self.brinkman_rhs(phi, mu, sigma)
        sol = self.brinkman.solve(rhs)
        return sol[: 2 * n].reshape(2, n), sol[2 * n:]

    def constraint_residual(self, vel, p, phi, sigma) -> float:
        """Relative residual of the assembled divergence rows."""
        n = self.n
        B = self.brinkman_matrix[2 * n:]
        x = np.concatenate([vel[0], vel[1], p])
        P, A = self.params.proliferation_P, self.params.apoptosis_A
        target = -self.mL * (P * sigma - A) * self.h(phi)
        Bx = B @ x
        scale = max(np.linalg.norm(target), np.linalg.norm(Bx), np.finfo(float).tiny)
        if np.linalg.norm(target) == 0 and np.linalg.norm(Bx) < 1e-300:
            return 0.0
        return float(np.linalg.norm(Bx - target) / scale)

    def divergence_error(self, vel, phi, sigma) -> float:
        """``||div v - (P sigma - A) h(phi)||_L2`` at quadrature points."""
        g = self.grid
        P, A = self.params.proliferation_P, self.params.apoptosis_A
        div = g.gather(vel[0], "dx") + g.gather(vel[1], "dy")
        target = g.gather((P * sigma - A) * self.h(phi))
        return float(np.sqrt(np.sum(g.qweight * (div - target) ** 2)))

    def ch_rhs(self, phi_o, sigma, vel, u_n):
        P, A, chi = self.params.proliferation_P, self.params.apoptosis_A, self.params.chemotaxis_chi
        dt, S = self.dt, self.opts.stabilization_S
        hphi = self.h(phi_o)
        r_phi = self.mL * phi_o + dt * self.mL * (P * sigma - A - u_n) * hphi
        if self.opts.velocity_enabled:
            r_phi = r_phi - dt * self.conv(phi_o, vel)
            if self.opts.upwind:
                r_phi = r_phi - dt * self.upwind_diffusion(phi_o, vel)
        r_mu = self.mL * (self.pot(phi_o, 1) - S * phi_o - chi * sigma)
        return r_phi, r_mu

    def ch_step(self, phi_o, mu_o, sigma, vel, u_n, step=None):
        n = self.n
        r_phi, r_mu = self.ch_rhs(phi_o, sigma, vel, u_n)
        if self.opts.nonlinear_mode == "stabilized_linear":
            sol = self.ch.solve(np.concatenate([r_phi, r_mu]))
            return sol[:n], sol[n:]
        return self._newton(phi_o, mu_o, r_phi, sigma, step)

    def _newton(self, phi_o, mu_o, r_phi, sigma, step):
        n = self.n
        dt, m, chi = self.dt, self.params.mobility_m, self.params.chemotaxis_chi
        phi, mu = phi_o.copy(), mu_o.copy()
        scale = max(1.0, np.linalg.norm(r_phi))
        for it in range(self.opts.newton_max_iter):
            F1 = self.mL * phi + dt * m * (self.K @ mu) - r_phi
            F2 = self.mL * mu - self.K @ phi - self.mL * (self.pot(phi, 1) - chi * sigma)
            res = np.sqrt(np.linalg.norm(F1) ** 2 + np.linalg.norm(F2) ** 2)
            if res <= self.opts.newton_tol * scale:
                return phi, mu
            J = self.ch_matrix(psi2=self.pot(phi, 2))
            delta = Factorized(J, "direct").solve(-np.concatenate([F1, F2]))
            phi = phi + delta[:n]
            mu = mu + delta[n:]
            if not np.all(np.isfinite(phi)):
                break
        raise SolverDivergence("newton_divergence", step)

    def initial(self, phi0: np.ndarray) -> StateSnapshot:
        phi0 = self.grid.check(phi0)
        chi = self.params.chemotaxis_chi
        sigma = self.solve_nutrient(phi0)
        mu = (self.K @ phi0) / self.mL + self.pot(phi0, 1) - chi * sigma
        if self.opts.velocity_enabled:
            vel, p = self.solve_brinkman(phi0, mu, sigma)
        else:
            vel, p = np.zeros((2, self.n)), np.zeros(self.n)
        return StateSnapshot(phi0.copy(), mu, sigma, vel, p)

    def step(self, prev: StateSnapshot, u_n: np.ndarray, step: int | None = None):
        """Advance one step; returns the new snapshot and the constraint residual."""
        try:
            sigma = self.solve_nutrient(prev.phi)
            if self.opts.velocity_enabled:
                vel, p = self.solve_brinkman(prev.phi, prev.mu, sigma)
                res = self.constraint_residual(vel, p, prev.phi, sigma)
            else:
                vel, p = np.zeros((2, self.n)), np.zeros(self.n)
                res = 0.0
            phi, mu = self.ch_step(prev.phi, prev.mu, sigma, vel, u_n, step)
            return StateSnapshot(phi, mu, sigma, vel, p), res
        except SolverDivergence as exc:
            if exc.step is None:
                raise SolverDivergence(str(exc), step) from exc
            raise

    def control_shape(self) -> tuple[int, int]:
        return (self.n_steps, self.n)

    def zero_control(self) -> np.ndarray:
        return np.zeros(self.control_shape())

    def solve(self, u: np.ndarray, phi0: np.ndarray) -> Trajectory:
        u = np.asarray(getattr(u, "values", u), dtype=float)
        if u.shape != self.control_shape():
            raise ValueError(f"control has shape {u.shape}, expected {self.control_shape()}")
        N, n = self.n_steps, self.n
        phi = np.empty((N + 1, n))
        mu = np.empty_like(phi)
        sigma = np.empty_like(phi)
        vel = np.empty((N + 1, 2, n))
        pres = np.empty_like(phi)
        snap = self.initial(phi0)
        residuals = [0.0]
        div_err = [self.divergence_error(snap.vel, snap.phi, snap.sigma) if self.opts.velocity_enabled else 0.0]
        for k in range(N + 1):
            if k > 0:
                snap, res = self.step(snap, u[k - 1], step=k)
                residuals.append(res)
                div_err.append(self.divergence_error(snap.vel, phi[k - 1], snap.sigma)
                               if self.opts.velocity_enabled else 0.0)
            phi[k], mu[k], sigma[k], vel[k], pres[k] = snap.phi, snap.mu, snap.sigma, snap.vel, snap.pressure
        diag = {"constraint_residual": np.array(residuals), "divergence_error": np.array(div_err)}
        return Trajectory(self, u.copy(), phi, mu, sigma, vel, pres, diag)

    def with_options(self, **changes) -> "Scheme":
        return Scheme(self.grid, self.params, self.h, self.pot, replace(self.opts, **changes))


def energy(grid: StructuredGrid, phi: np.ndarray, pot: Potential) -> float:
    """Discrete Ginzburg-Landau energy ``1/2 phi.K phi + sum_i m_i psi(phi_i)``."""
    K = assemble_stiffness_neumann(grid)
    return float(0.5 * phi @ (K @ phi) + np.dot(lumped_mass(grid), pot(phi, 0)))


# -- module-level entry points ----------------------------------------------

def solve_nutrient(scheme: Scheme, phi: np.ndarray) -> np.ndarray:
    return scheme.solve_nutrient(phi)


def solve_brinkman(scheme: Scheme, phi, mu, sigma):
    return scheme.solve_brinkman(phi, mu, sigma)


def ch_step(scheme: Scheme, prev: StateSnapshot, u_slice, sigma, vel):
    return scheme.ch_step(prev.phi, prev.mu, sigma, vel, u_slice)


def solve_state(scheme: Scheme, u, phi0) -> Trajectory:
    return scheme.solve(u, phi0)
