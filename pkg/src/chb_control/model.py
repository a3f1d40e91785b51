"""Physical parameters, double-well potentials and interpolation functions.

Two potentials are supported: the classical double well
``psi(s) = (s**2 - 1)**2 / 4`` and a smoothed variant ``psi_delta`` that
coincides with it on ``[-delta, delta]`` but has a bounded third
derivative ``|psi_delta'''| <= 6 (delta + 1)``.

The interpolation function ``h`` comes in three flavours (linear clamp,
quadratic interface, cosine interface).  Their kinks at ``s = +-1`` are
removed by blending towards the plateau with a C^3 smoothstep over a band of
configurable width that lies inside ``[-1, 1]``, so ``h(-1)``/``h(1)`` keep
their raw values exactly.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, fields
from typing import Union

import numpy as np

__all__ = [
    "ModelParams",
    "Potential",
    "InterpolationH",
    "psi_eval",
    "xi_delta",
    "zeta",
    "h_eval",
    "h_sup_norms",
    "psi_third_bound",
]

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class ModelParams:
    """Physical constants of the tumour growth system.

    ``sigma_B`` is either a scalar or a nodal array (constant in time).
    ``epsilon`` is fixed to one; other values are rejected.
    """

    proliferation_P: float = 0.0
    apoptosis_A: float = 0.0
    chemotaxis_chi: float = 0.0
    permeability_nu: float = 1.0
    shear_eta: float = 1.0
    bulk_lambda: float = 0.0
    mobility_m: float = 1.0
    nutrient_b: float = 1.0
    sigma_B: ArrayLike = 1.0
    epsilon: float = 1.0
    final_time_T: float = 1.0

    def __post_init__(self):
        for name in ("final_time_T", "shear_eta", "permeability_nu", "mobility_m", "nutrient_b"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be positive, got {val!r}")
        for name in ("proliferation_P", "apoptosis_A", "bulk_lambda", "chemotaxis_chi"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val >= 0):
                raise ValueError(f"{name} must be non-negative, got {val!r}")
        if self.epsilon != 1.0:
            raise ValueError("epsilon is fixed to 1")
        if not np.all(np.isfinite(np.asarray(self.sigma_B, dtype=float))):
            raise ValueError("sigma_B must be finite")

    def sigma_B_nodal(self, n_nodes: int) -> np.ndarray:
        sb = np.asarray(self.sigma_B, dtype=float)
        if sb.ndim == 0:
            return np.full(n_nodes, float(sb))
        if sb.shape != (n_nodes,):
            raise ValueError(f"sigma_B has shape {sb.shape}, expected ({n_nodes},)")
        return sb

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = val.tolist() if isinstance(val, np.ndarray) else val
        return out


# ---------------------------------------------------------------------------
# potentials

def zeta(s: ArrayLike) -> ArrayLike:
    """``exp(-1/s**2)`` for ``s > 0`` and zero otherwise."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    pos = s > 0
    out[pos] = np.exp(-1.0 / s[pos] ** 2)
    return out if out.ndim else float(out)


def xi_delta(delta: float, s: ArrayLike) -> ArrayLike:
    """Cut-off that is one on ``[0, delta]`` and zero beyond ``delta + 1``."""
    if not delta > 1:
        raise ValueError(f"invalid_delta: delta must exceed 1, got {delta!r}")
    s = np.asarray(s, dtype=float)
    out = np.where(s <= delta, 1.0, 0.0)
    mid = (s > delta) & (s < delta + 1)
    if np.any(mid):
        sm = s[mid]
        # ratio of exponentials combined in log space for accuracy
        a = 1.0 + sm - delta
        b = 1.0 + delta - sm
        out[mid] = np.exp(2.0 - 1.0 / a**2 - 1.0 / b**2)
    return out if out.ndim else float(out)


_GL_ORDER = 10
_GL_X, _GL_W = np.polynomial.legendre.leggauss(_GL_ORDER)


class _SmoothedTables:
    """Cumulative moments ``int_delta^t z^k xi(z) dz`` (k = 1, 2, 3) on panels."""

    def __init__(self, delta: float, tol: float = 1e-13):
        self.delta = delta
        n = 64
        prev = None
        while True:
            edges = np.linspace(delta, delta + 1.0, n + 1)
            cum = self._cumulative(edges)
            if prev is not None and np.max(np.abs(cum[:, -1] - prev)) < tol:
                break
            prev = cum[:, -1]
            n *= 2
            if n > 2**16:  # pragma: no cover
                break
        self.edges = edges
        self.cum = cum
        self.width = 1.0 / n

    @staticmethod
    def _panel_moments(lo, hi, delta):
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        z = mid[..., None] + half[..., None] * _GL_X
        xi = xi_delta(delta, z)
        wts = half[..., None] * _GL_W
        return np.stack([np.sum(wts * z**k * xi, axis=-1) for k in (1, 2, 3)])

    def _cumulative(self, edges):
        m = self._panel_moments(edges[:-1], edges[1:], self.delta)
        return np.concatenate([np.zeros((3, 1)), np.cumsum(m, axis=1)], axis=1)

    def moments(self, t: np.ndarray) -> np.ndarray:
        """Moments up to ``t`` (clipped to ``[delta, delta + 1]``), shape (3, len(t))."""
        t = np.clip(t, self.delta, self.delta + 1.0)
        idx = np.minimum(((t - self.delta) / self.width).astype(int), len(self.edges) - 2)
        lo = self.edges[idx]
        partial = self._panel_moments(lo, t, self.delta)
        return self.cum[:, idx] + partial


@functools.lru_cache(maxsize=16)
def _tables(delta: float) -> _SmoothedTables:
    return _SmoothedTables(delta)


@dataclass(frozen=True)
class Potential:
    """Double-well potential, optionally smoothed beyond ``|s| > delta``."""

    kind: str = "double_well"
    delta: float | None = None

    def __post_init__(self):
        if self.kind not in ("double_well", "smoothed"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "smoothed":
            if self.delta is None or not self.delta > 1:
                raise ValueError("invalid_delta: smoothed potential needs delta > 1")

    @classmethod
    def double_well(cls) -> "Potential":
        return cls("double_well")

    @classmethod
    def smoothed(cls, delta: float) -> "Potential":
        return cls("smoothed", float(delta))

    def __call__(self, s, order=0):
        return psi_eval(self, s, order)


def _double_well(s, order):
    if order == 0:
        return 0.25 * (s * s - 1.0) ** 2
    if order == 1:
        return s**3 - s
    if order == 2:
        return 3.0 * s * s - 1.0
    return 6.0 * s


def _smoothed_tail(delta, t, order):
    """psi_delta and derivatives for ``t > delta`` (t >= 0)."""
    if order == 3:
        return 6.0 * t * xi_delta(delta, t)
    i1, i2, i3 = _tables(delta).moments(t)
    d2 = delta * delta
    a = t - delta
    if order == 2:
        return -1.0 + 6.0 * (0.5 * d2 + i1)
    if order == 1:
        return -t + 6.0 * (d2 * delta / 6.0 + 0.5 * d2 * a + t * i1 - i2)
    return (0.25 - 0.5 * t * t
            + 6.0 * (d2 * d2 / 24.0 + d2 * delta * a / 6.0 + 0.25 * d2 * a * a
                     + 0.5 * (t * t * i1 - 2.0 * t * i2 + i3)))


def psi_eval(pot: Potential, s: ArrayLike, order: int = 0) -> ArrayLike:
    """Evaluate the potential (or its derivative of the given order) at ``s``."""
    if order not in (0, 1, 2, 3):
        raise ValueError(f"order must be 0..3, got {order!r}")
    s_arr = np.asarray(s, dtype=float)
    out = _double_well(s_arr, order)
    if pot.kind == "smoothed":
        t = np.abs(s_arr)
        tail = t > pot.delta
        if np.any(tail):
            out = np.array(out, dtype=float, copy=True)
            vals = _smoothed_tail(pot.delta, t[tail], order)
            if order in (1, 3):
                vals = np.sign(s_arr[tail]) * vals
            out[tail] = vals
    out = np.asarray(out, dtype=float)
    return out if out.ndim else float(out)


def psi_third_bound(pot: Potential, r: float) -> float:
    """``sup |psi'''|`` over ``[-r, r]``; the smoothed kind uses ``6 (delta + 1)``."""
    if pot.kind == "smoothed":
        return 6.0 * (pot.delta + 1.0)
    return 6.0 * abs(r)


# ---------------------------------------------------------------------------
# interpolation functions

def _smoothstep(t, order):
    """C^3 septic smoothstep on [0, 1] and its derivatives in t."""
    t = np.clip(t, 0.0, 1.0)
    if order == 0:
        return t**4 * (35.0 - 84.0 * t + 70.0 * t * t - 20.0 * t**3)
    u = t * (1.0 - t)
    if order == 1:
        return 140.0 * u**3
    if order == 2:
        return 420.0 * u * u * (1.0 - 2.0 * t)
    return 840.0 * u * ((1.0 - 2.0 * t) ** 2 - u)


def _raw_inner(variant, s, order):
    if variant == "linear_clamp":
        return [0.5 * (1.0 + s), np.full_like(s, 0.5), np.zeros_like(s), np.zeros_like(s)][order]
    if variant == "quadratic_interface":
        return [0.5 * (1.0 - s * s), -s, -np.ones_like(s), np.zeros_like(s)][order]
    pi = math.pi
    if order == 0:
        return 0.5 * (np.cos(pi * s) + 1.0)
    if order == 1:
        return -0.5 * pi * np.sin(pi * s)
    if order == 2:
        return -0.5 * pi**2 * np.cos(pi * s)
    return 0.5 * pi**3 * np.sin(pi * s)


_PLATEAUS = {
    "linear_clamp": (0.0, 1.0),
    "quadratic_interface": (0.0, 0.0),
    "cosine_interface": (0.0, 0.0),
}


@dataclass(frozen=True)
class InterpolationH:
    """Interpolation function with C^3-regularized kinks at ``s = +-1``."""

    variant: str = "linear_clamp"
    regularization_width: float = 0.1

    def __post_init__(self):
        if self.variant not in _PLATEAUS:
            raise ValueError(f"unknown h variant {self.variant!r}")
        if not 0 < self.regularization_width <= 1:
            raise ValueError("regularization_width must lie in (0, 1]")

    def __call__(self, s, order=0):
        return h_eval(self, s, order)


def h_eval(h: InterpolationH, s: ArrayLike, order: int = 0) -> ArrayLike:
    """Value (order 0) or derivative (order 1..3) of the regularized ``h``."""
    if order not in (0, 1, 2, 3):
        raise ValueError(f"order must be 0..3, got {order!r}")
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    w = h.regularization_width
    lower, upper = _PLATEAUS[h.variant]
    out = np.zeros_like(s_arr)

    inner = np.abs(s_arr) <= 1.0 - w
    out[inner] = _raw_inner(h.variant, s_arr[inner], order)
    if order == 0:
        out[s_arr <= -1.0] = lower
        out[s_arr >= 1.0] = upper

    for side, plateau in ((-1.0, lower), (1.0, upper)):
        band = (side * s_arr > 1.0 - w) & (side * s_arr < 1.0)
        if not np.any(band):
            continue
        sb = s_arr[band]
        t = (1.0 - side * sb) / w
        dt = -side / w
        acc = np.zeros_like(sb)
        # Leibniz rule on plateau + (f - plateau) * S(t)
        for j in range(order + 1):
            dj = _raw_inner(h.variant, sb, j)
            if j == 0:
                dj = dj - plateau
            acc += math.comb(order, j) * dj * _smoothstep(t, order - j) * dt ** (order - j)
        if order == 0:
            acc += plateau
        out[band] = acc
    if np.ndim(s) == 0:
        return float(out[0])
    return out.reshape(np.shape(s))


@functools.lru_cache(maxsize=32)
def h_sup_norms(h: InterpolationH, samples: int = 400001) -> tuple:
    """Sampled ``(sup|h|, sup|h'|, sup|h''|, sup|h'''|)`` over the real line.

    ``h`` is constant outside ``[-1, 1]``, so sampling that interval suffices.
    """
    s = np.linspace(-1.0, 1.0, samples)
    return tuple(float(np.max(np.abs(h_eval(h, s, k)))) for k in range(4))
