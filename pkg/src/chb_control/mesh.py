"""Structured Q1 discretization of a rectangle.

Nodes are numbered row-major with x running fastest, ``k = j * nx + i``.
Fields are plain float arrays: scalars have shape ``(n_nodes,)`` and vector
fields ``(2, n_nodes)``.  All element integrals use the 2 x 2 Gauss rule,
which is exact for products of bilinear functions, so the consistent mass and
stiffness matrices below are exact.

Zeroth-order terms of the time-stepping scheme use the lumped mass (nodal
trapezoidal rule).  Its weights sum to the domain area and make the nutrient
operator an M-matrix.
"""
from __future__ import annotations

import csv
import functools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import _kernels

__all__ = [
    "GridMismatchError",
    "StructuredGrid",
    "assemble_mass",
    "lumped_mass",
    "assemble_stiffness_neumann",
    "assemble_brinkman_operator",
    "default_pressure_stabilization",
    "inner",
    "norm",
    "write_scalar_csv",
    "write_vector_csv",
    "read_scalar_csv",
    "read_vector_csv",
]


class GridMismatchError(ValueError):
    """A field does not live on the grid it is used with."""


_GP = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


def _reference_tables():
    # local nodes (0,0), (1,0), (0,1), (1,1); quadrature points tensor ordered the same way
    qx = np.array([_GP[0], _GP[1], _GP[0], _GP[1]])
    qy = np.array([_GP[0], _GP[0], _GP[1], _GP[1]])
    lx = np.array([0.0, 1.0, 0.0, 1.0])
    ly = np.array([0.0, 0.0, 1.0, 1.0])
    bx = np.where(lx[None, :] == 1.0, qx[:, None], 1.0 - qx[:, None])
    by = np.where(ly[None, :] == 1.0, qy[:, None], 1.0 - qy[:, None])
    dbx = np.where(lx[None, :] == 1.0, 1.0, -1.0) * np.ones((4, 1))
    dby = np.where(ly[None, :] == 1.0, 1.0, -1.0) * np.ones((4, 1))
    return bx * by, dbx * by, bx * dby


@dataclass(frozen=True)
class StructuredGrid:
    """Uniform node grid on ``[0, lx] x [0, ly]``."""

    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("nx and ny must be at least 3")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("domain lengths must be positive")

    @property
    def hx(self) -> float:
        return self.lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.ly / (self.ny - 1)

    @property
    def h(self) -> float:
        return max(self.hx, self.hy)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def area(self) -> float:
        return self.lx * self.ly

    @functools.cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.linspace(0.0, self.lx, self.nx)
        y = np.linspace(0.0, self.ly, self.ny)
        X, Y = np.meshgrid(x, y)
        return X.ravel(), Y.ravel()

    @functools.cached_property
    def conn(self) -> np.ndarray:
        i, j = np.meshgrid(np.arange(self.nx - 1), np.arange(self.ny - 1))
        base = (j * self.nx + i).ravel()
        return np.ascontiguousarray(
            np.stack([base, base + 1, base + self.nx, base + self.nx + 1], axis=1), dtype=np.int64)

    @functools.cached_property
    def tables(self) -> dict[str, np.ndarray]:
        val, dx, dy = _reference_tables()
        return {"val": val, "dx": dx / self.hx, "dy": dy / self.hy}

    @property
    def qweight(self) -> float:
        return 0.25 * self.hx * self.hy

    def check(self, f: np.ndarray, vector: bool = False) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        shape = (2, self.n_nodes) if vector else (self.n_nodes,)
        if f.shape != shape:
            raise GridMismatchError(f"field shape {f.shape} does not match grid {shape}")
        return f

    # quadrature-point primitives -------------------------------------------

    def gather(self, f: np.ndarray, which: str = "val") -> np.ndarray:
        """Values (or x/y derivatives) of a nodal field at quadrature points."""
        return _kernels.gather(self.conn, f, self.tables[which])

    def scatter(self, qvals: np.ndarray, which: str = "val") -> np.ndarray:
        """Load vector ``int q * test`` (``test`` = basis, or its x/y derivative)."""
        return _kernels.scatter(self.conn, qvals, self.tables[which], self.qweight, self.n_nodes)

    def pair(self, coef, which_i: str = "val", which_j: str = "val") -> sp.csr_matrix:
        """Sparse matrix ``A[i, j] = int coef * D_i N_i * D_j N_j``.

        ``coef`` is a scalar or an array of quadrature values (E x 4).
        """
        coef = np.broadcast_to(np.asarray(coef, dtype=float), self.conn.shape)
        blocks = _kernels.pair(self.conn, coef, self.tables[which_i], self.tables[which_j], self.qweight)
        rows = np.repeat(self.conn, 4, axis=1).ravel()
        cols = np.tile(self.conn, (1, 4)).ravel()
        n = self.n_nodes
        return sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()

    def manifest(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "lx": self.lx, "ly": self.ly,
                "hx": self.hx, "hy": self.hy, "n_nodes": self.n_nodes}


@functools.lru_cache(maxsize=32)
def assemble_mass(grid: StructuredGrid, lumped: bool = False) -> sp.csr_matrix:
    """Consistent (or row-sum lumped) Q1 mass matrix."""
    M = grid.pair(1.0)
    if lumped:
        return sp.diags(np.asarray(M.sum(axis=1)).ravel()).tocsr()
    return M


@functools.lru_cache(maxsize=32)
def _lumped(grid: StructuredGrid) -> np.ndarray:
    w = np.asarray(assemble_mass(grid).sum(axis=1)).ravel()
    w.setflags(write=False)
    return w


def lumped_mass(grid: StructuredGrid) -> np.ndarray:
    """Nodal quadrature weights (row sums of the consistent mass matrix)."""
    return _lumped(grid)


@functools.lru_cache(maxsize=32)
def assemble_stiffness_neumann(grid: StructuredGrid) -> sp.csr_matrix:
    """Q1 stiffness matrix with natural (homogeneous Neumann) boundary."""
    return (grid.pair(1.0, "dx", "dx") + grid.pair(1.0, "dy", "dy")).tocsr()


def default_pressure_stabilization(grid: StructuredGrid, eta: float) -> float:
    return 0.1 * grid.h**2 / eta


def assemble_brinkman_operator(grid: StructuredGrid, params, pressure_stabilization: float | None = None
                               ) -> sp.csr_matrix:
    """Stabilized equal-order block operator over ``(vx, vy, p)``.

    Rows are the weak form ``a(v, w) - (p, div w) = f`` and
    ``-(div v, q) - gamma (grad p, grad q) = -(g, q)``; the traction-free
    boundary condition is natural.
    """
    eta, lam, nu = params.shear_eta, params.bulk_lambda, params.permeability_nu
    if nu <= 0:
        raise ValueError("singular_system: permeability_nu must be positive")
    gamma = default_pressure_stabilization(grid, eta) if pressure_stabilization is None else pressure_stabilization
    M = assemble_mass(grid)
    K = assemble_stiffness_neumann(grid)
    Kxx = grid.pair(1.0, "dx", "dx")
    Kyy = grid.pair(1.0, "dy", "dy")
    Kxy = grid.pair(1.0, "dx", "dy")
    Kyx = Kxy.T.tocsr()
    Cx = grid.pair(1.0, "val", "dx")
    Cy = grid.pair(1.0, "val", "dy")
    Axx = 2 * eta * (Kxx + 0.5 * Kyy) + lam * Kxx + nu * M
    Ayy = 2 * eta * (Kyy + 0.5 * Kxx) + lam * Kyy + nu * M
    Axy = eta * Kyx + lam * Kxy
    return sp.bmat([
        [Axx, Axy, -Cx.T],
        [Axy.T, Ayy, -Cy.T],
        [-Cx, -Cy, -gamma * K],
    ]).tocsr()


# ---------------------------------------------------------------------------
# norms

def inner(grid: StructuredGrid, f: np.ndarray, g: np.ndarray, lumped: bool = True) -> float:
    """Discrete L2 inner product of two scalar fields."""
    f = grid.check(f)
    g = grid.check(g)
    if lumped:
        return float(np.dot(lumped_mass(grid) * f, g))
    return float(f @ (assemble_mass(grid) @ g))


def norm(grid: StructuredGrid, f: np.ndarray, kind: str = "L2", p: float | None = None,
         lumped: bool = True) -> float:
    """Discrete norms: ``L2``, ``H1``, ``Linf`` or ``Lp`` (``p`` in [1, 6])."""
    f = grid.check(f)
    if kind == "L2":
        return float(np.sqrt(max(inner(grid, f, f, lumped), 0.0)))
    if kind == "H1":
        semi = float(f @ (assemble_stiffness_neumann(grid) @ f))
        return float(np.sqrt(max(inner(grid, f, f, lumped) + semi, 0.0)))
    if kind == "Linf":
        return float(np.max(np.abs(f)))
    if kind == "Lp":
        if p is None or not 1 <= p <= 6:
            raise ValueError("Lp norm needs p in [1, 6]")
        return float(np.dot(lumped_mass(grid), np.abs(f) ** p) ** (1.0 / p))
    raise ValueError(f"unknown norm kind {kind!r}")


# ---------------------------------------------------------------------------
# snapshot files

def write_scalar_csv(path, grid: StructuredGrid, values: np.ndarray) -> None:
    values = grid.check(values)
    x, y = grid.coords
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value"])
        for row in zip(x, y, values):
            w.writerow([repr(float(v)) for v in row])


def write_vector_csv(path, grid: StructuredGrid, values: np.ndarray) -> None:
    values = grid.check(values, vector=True)
    x, y = grid.coords
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "vx", "vy"])
        for row in zip(x, y, values[0], values[1]):
            w.writerow([repr(float(v)) for v in row])


def _read_csv(path, header):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise ValueError(f"{path}: expected header {','.join(header)}")
    return np.array([[float(v) for v in r] for r in rows[1:]])


def read_scalar_csv(path, grid: StructuredGrid | None = None) -> np.ndarray:
    data = _read_csv(path, ["x", "y", "value"])
    if grid is not None:
        _check_coords(path, grid, data)
    return data[:, 2].copy()


def read_vector_csv(path, grid: StructuredGrid | None = None) -> np.ndarray:
    data = _read_csv(path, ["x", "y", "vx", "vy"])
    if grid is not None:
        _check_coords(path, grid, data)
    return data[:, 2:4].T.copy()


def _check_coords(path, grid, data):
    x, y = grid.coords
    if data.shape[0] != grid.n_nodes or not (
            np.allclose(data[:, 0], x) and np.allclose(data[:, 1], y)):
        raise GridMismatchError(f"{path}: node coordinates do not match the grid")


def write_grid_manifest(path, grid: StructuredGrid, **extra) -> None:
    with open(Path(path), "w") as fh:
        json.dump({"grid": grid.manifest(), **extra}, fh, indent=2, sort_keys=True)
