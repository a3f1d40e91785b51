"""Element-loop kernels for Q1 quadrature assembly.

Every nonlinear form in the scheme reduces to three primitives over the
element connectivity ``conn`` (E x 4) and a reference table ``basis`` (Q x 4)
holding basis values or derivatives at the quadrature points:

* ``gather``   nodal field -> quadrature values (E x Q)
* ``scatter``  quadrature values -> nodal load vector
* ``pair``     quadrature coefficient -> element matrices (E x 4 x 4)

Each primitive has a numba path and a pure-numpy path.  The numba path is
used when numba imports and ``CHB_NUMBA`` is not set to ``0``.
"""
import os

import numpy as np

_ENV_FLAG = "CHB_NUMBA"


def _numba_requested():
    return os.environ.get(_ENV_FLAG, "1").strip().lower() not in ("0", "false", "no", "off")


try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


# -- numpy reference paths ---------------------------------------------------

def gather_numpy(conn, values, basis):
    return values[conn] @ basis.T


def scatter_numpy(conn, qvals, basis, weight, n_nodes):
    local = (qvals * weight) @ basis
    return np.bincount(conn.ravel(), weights=local.ravel(), minlength=n_nodes)


def pair_numpy(conn, coef, basis_i, basis_j, weight):
    return np.einsum("eq,qa,qb->eab", coef * weight, basis_i, basis_j, optimize=True)


# -- numba paths -------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def gather_numba(conn, values, basis):
        n_el = conn.shape[0]
        n_q, n_loc = basis.shape
        out = np.zeros((n_el, n_q))
        for e in range(n_el):
            for q in range(n_q):
                acc = 0.0
                for a in range(n_loc):
                    acc += basis[q, a] * values[conn[e, a]]
                out[e, q] = acc
        return out

    @numba.njit(cache=True)
    def scatter_numba(conn, qvals, basis, weight, n_nodes):
        n_el = conn.shape[0]
        n_q, n_loc = basis.shape
        out = np.zeros(n_nodes)
        # element order is fixed, so the reduction order is deterministic
        for e in range(n_el):
            for a in range(n_loc):
                acc = 0.0
                for q in range(n_q):
                    acc += qvals[e, q] * weight * basis[q, a]
                out[conn[e, a]] += acc
        return out

    @numba.njit(cache=True)
    def pair_numba(conn, coef, basis_i, basis_j, weight):
        n_el = conn.shape[0]
        n_q, n_loc = basis_i.shape
        out = np.zeros((n_el, n_loc, n_loc))
        for e in range(n_el):
            for q in range(n_q):
                c = coef[e, q] * weight
                for a in range(n_loc):
                    ca = c * basis_i[q, a]
                    for b in range(n_loc):
                        out[e, a, b] += ca * basis_j[q, b]
        return out

else:  # pragma: no cover
    gather_numba = scatter_numba = pair_numba = None


def backend():
    """Name of the active kernel backend: ``"numba"`` or ``"numpy"``."""
    return "numba" if (HAVE_NUMBA and _numba_requested()) else "numpy"


def gather(conn, values, basis):
    values = np.ascontiguousarray(values, dtype=np.float64)
    if backend() == "numba":
        return gather_numba(conn, values, basis)
    return gather_numpy(conn, values, basis)


def scatter(conn, qvals, basis, weight, n_nodes):
    qvals = np.ascontiguousarray(qvals, dtype=np.float64)
    if backend() == "numba":
        return scatter_numba(conn, qvals, basis, float(weight), int(n_nodes))
    return scatter_numpy(conn, qvals, basis, weight, n_nodes)


def pair(conn, coef, basis_i, basis_j, weight):
    coef = np.ascontiguousarray(coef, dtype=np.float64)
    if backend() == "numba":
        return pair_numba(conn, coef, basis_i, basis_j, float(weight))
    return pair_numpy(conn, coef, basis_i, basis_j, weight)
