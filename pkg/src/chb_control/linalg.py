"""Sparse linear solves with a Krylov path and a direct fallback."""
from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class SolverDivergence(RuntimeError):
    """A linear or nonlinear solve failed to reach its tolerance."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class Factorized:
    """Reusable solver for one sparse matrix.

    ``method="direct"`` factorizes once with SuperLU.  ``method="krylov"``
    runs CG (``symmetric=True``) or GMRES with an incomplete-LU
    preconditioner and falls back to the direct factorization when the
    relative residual stays above ``tol``.
    """

    def __init__(self, A, method: str = "direct", symmetric: bool = False, tol: float = 1e-10):
        if method not in ("direct", "krylov"):
            raise ValueError(f"unknown linear solver method {method!r}")
        self.A = sp.csc_matrix(A)
        self.method = method
        self.symmetric = symmetric
        self.tol = tol
        self._lu = None
        self._ilu = None

    @property
    def lu(self):
        if self._lu is None:
            try:
                self._lu = spla.splu(self.A)
            except RuntimeError as exc:
                raise SolverDivergence(f"sparse factorization failed: {exc}") from exc
        return self._lu

    def solve(self, b: np.ndarray, trans: bool = False) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.method == "krylov":
            x = self._krylov(b, trans)
            if x is not None:
                return x
            log.debug("krylov solve missed tolerance, using direct fallback")
        x = self.lu.solve(b, trans="T" if trans else "N")
        if not np.all(np.isfinite(x)):
            raise SolverDivergence("non-finite solution")
        return x

    def _krylov(self, b, trans):
        A = self.A.T.tocsc() if trans and not self.symmetric else self.A
        bnorm = np.linalg.norm(b)
        if bnorm == 0:
            return np.zeros_like(b)
        try:
            if self._ilu is None or trans:
                ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
                if not trans:
                    self._ilu = ilu
            else:
                ilu = self._ilu
            P = spla.LinearOperator(A.shape, ilu.solve)
            if self.symmetric:
                x, info = spla.cg(A, b, rtol=self.tol, atol=0.0, M=P, maxiter=2000)
            else:
                x, info = spla.gmres(A, b, rtol=self.tol, atol=0.0, M=P, restart=100, maxiter=50)
        except RuntimeError:
            return None
        if info != 0 or np.linalg.norm(A @ x - b) > self.tol * bnorm * 10:
            return None
        return x


def relative_residual(A, x, b) -> float:
    r = np.linalg.norm(A @ x - b)
    scale = max(np.linalg.norm(b), np.linalg.norm(A @ x), np.finfo(float).tiny)
    return float(r / scale)
