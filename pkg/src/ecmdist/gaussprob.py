"""Univariate and bivariate standard normal rectangle probabilities.

The bivariate kernel is Genz's upper-orthant algorithm (Gauss-Legendre
quadrature over the correlation, with a separate expansion for |rho| >= 0.925).
Rectangles are obtained by inclusion-exclusion over orthants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

INF = math.inf
_SQRT1_2 = 1.0 / math.sqrt(2.0)
_TWOPI = 2.0 * math.pi
RHO_DEGENERATE = 1.0 - 1e-12


def _half_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(2 * n)
    return x[:n].copy(), w[:n].copy()


_GL = [_half_rule(n) for n in (3, 6, 10)]
_GL_X = np.zeros((3, 10))
_GL_W = np.zeros((3, 10))
for _i, (_x, _w) in enumerate(_GL):
    _GL_X[_i, : _x.size] = _x
    _GL_W[_i, : _w.size] = _w
_GL_N = np.array([3, 6, 10])


@dataclass(frozen=True)
class Interval:
    """Closed-open interval ``[lo, hi)`` on the real line; bounds may be infinite."""

    lo: float = -INF
    hi: float = INF

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if math.isnan(lo) or math.isnan(hi) or lo > hi:
            raise ValueError(f"invalid interval [{self.lo}, {self.hi})")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class Rect2D:
    """Axis-aligned rectangle ``x * y``."""

    x: Interval
    y: Interval

    @classmethod
    def from_bounds(cls, x_lo, x_hi, y_lo, y_hi) -> "Rect2D":
        return cls(Interval(x_lo, x_hi), Interval(y_lo, y_hi))

    @classmethod
    def square(cls, x_lo: float, y_lo: float, side: float) -> "Rect2D":
        return cls.from_bounds(x_lo, x_lo + side, y_lo, y_lo + side)

    def bounds(self) -> tuple[float, float, float, float]:
        return (self.x.lo, self.x.hi, self.y.lo, self.y.hi)

    def overlaps(self, other: "Rect2D") -> bool:
        return (
            self.x.lo < other.x.hi
            and other.x.lo < self.x.hi
            and self.y.lo < other.y.hi
            and other.y.lo < self.y.hi
        )


@nb.vectorize(["float64(float64)"], cache=True)
def std_normal_cdf(x):
    """Standard normal cdf, ``0.5 * erfc(-x / sqrt(2))``."""
    return 0.5 * math.erfc(-x * _SQRT1_2)


@nb.njit(cache=True)
def _phi(x):
    return 0.5 * math.erfc(-x * _SQRT1_2)


@nb.njit(cache=True)
def _interval_prob(lo, hi):
    # evaluate in the tail that keeps precision
    if lo > 0.0:
        p = _phi(-lo) - _phi(-hi)
    else:
        p = _phi(hi) - _phi(lo)
    return max(p, 0.0)


@nb.njit(cache=True)
def _prepare(r):
    """Per-correlation quadrature nodes. Returns (kind, nodes) with nodes (5, 20)."""
    nodes = np.zeros((5, 20))
    ar = abs(r)
    if ar < 0.925:
        if ar < 0.3:
            g = 0
        elif ar < 0.75:
            g = 1
        else:
            g = 2
        n = _GL_N[g]
        asr = math.asin(r)
        for i in range(n):
            for s in range(2):
                x = _GL_X[g, i] if s == 0 else -_GL_X[g, i]
                sn = math.sin(asr * (x + 1.0) / 2.0)
                nodes[0, 2 * i + s] = sn
                nodes[1, 2 * i + s] = 1.0 / (1.0 - sn * sn)
                nodes[2, 2 * i + s] = _GL_W[g, i] * asr / (2.0 * _TWOPI)
        return 2 * n, nodes
    if ar > RHO_DEGENERATE:
        return -1, nodes
    a_s = (1.0 - r) * (1.0 + r)
    a = math.sqrt(a_s) / 2.0
    for i in range(10):
        x = _GL_X[2, i]
        for s, xs in enumerate(((a * (x + 1.0)) ** 2, a_s * (1.0 - x) ** 2 / 4.0)):
            rs = math.sqrt(1.0 - xs)
            nodes[0, 2 * i + s] = xs
            nodes[1, 2 * i + s] = 1.0 / rs
            nodes[2, 2 * i + s] = a * _GL_W[2, i]
            nodes[3, 2 * i + s] = 0.5 / xs
            nodes[4, 2 * i + s] = xs / (2.0 * (1.0 + rs) ** 2)
    return 0, nodes


@nb.njit(cache=True)
def _bvnu_core(h, k, ph, pk, r, kind, nodes):
    """P(Z1 > h, Z2 > k); ph = Phi(-h), pk = Phi(-k) are passed in precomputed."""
    if h == INF or k == INF:
        return 0.0
    if h == -INF:
        return pk
    if k == -INF:
        return ph
    if kind > 0:
        hk = h * k
        hs = (h * h + k * k) / 2.0
        acc = 0.0
        for i in range(kind):
            acc += nodes[2, i] * math.exp((nodes[0, i] * hk - hs) * nodes[1, i])
        return acc + ph * pk
    if kind < 0:
        if r > 0:
            return min(ph, pk)
        return max(0.0, ph + pk - 1.0)
    hk = h * k
    if r < 0:
        k = -k
        hk = -hk
    a_s = (1.0 - r) * (1.0 + r)
    bs = (h - k) ** 2
    bvn = 0.0
    # every term is below exp(-50) times a modest polynomial factor
    if bs * (0.5 / a_s - 1.0 / 7.5) <= 50.0:
        a = math.sqrt(a_s)
        c = (4.0 - hk) / 8.0
        d = (12.0 - hk) / 16.0
        asr = -(bs / a_s + hk) / 2.0
        if asr > -100.0:
            bvn = a * math.exp(asr) * (
                1.0 - c * (bs - a_s) * (1.0 - d * bs / 5.0) / 3.0 + c * d * a_s * a_s / 5.0
            )
        if hk > -160.0:
            b = math.sqrt(bs)
            bvn -= (
                math.exp(-hk / 2.0)
                * math.sqrt(_TWOPI)
                * _phi(-b / a)
                * b
                * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
            )
        for i in range(20):
            asr = -bs * nodes[3, i] - hk / 2.0
            if asr > -100.0:
                xs = nodes[0, i]
                bvn += (
                    nodes[2, i]
                    * math.exp(asr)
                    * (math.exp(-hk * nodes[4, i]) * nodes[1, i] - (1.0 + c * xs * (1.0 + d * xs)))
                )
        bvn = -bvn / _TWOPI
    if r > 0:
        return bvn + min(ph, pk)
    bvn = -bvn
    if k > h:
        # k is negated here, so pk = Phi(k)
        bvn += max(0.0, ph + pk - 1.0)
    return bvn


@nb.njit(cache=True)
def _rect_scalar(alo, ahi, blo, bhi, r):
    kind, nodes = _prepare(r)
    e1 = (alo, ahi)
    e2 = (blo, bhi)
    total = 0.0
    for i in range(2):
        pi = _phi(-e1[i])
        for j in range(2):
            u = _bvnu_core(e1[i], e2[j], pi, _phi(-e2[j]), r, kind, nodes)
            total += u if i == j else -u
    return min(max(total, 0.0), 1.0)


@nb.njit(cache=True)
def rect_grid(lo1, hi1, lo2, hi2, r, out):
    """Fill ``out[l, l']`` with P(Z1 in [lo1[l], hi1[l]), Z2 in [lo2[l'], hi2[l']]).

    All bounds are standardized; one correlation ``r`` is shared by the whole grid.
    """
    m1 = lo1.size
    m2 = lo2.size
    kind, nodes = _prepare(r)
    e1 = np.concatenate((lo1, hi1))
    e2 = np.concatenate((lo2, hi2))
    p1 = np.empty(2 * m1)
    p2 = np.empty(2 * m2)
    for i in range(2 * m1):
        p1[i] = _phi(-e1[i])
    for j in range(2 * m2):
        p2[j] = _phi(-e2[j])
    u = np.empty((2 * m1, 2 * m2))
    for i in range(2 * m1):
        for j in range(2 * m2):
            u[i, j] = _bvnu_core(e1[i], e2[j], p1[i], p2[j], r, kind, nodes)
    for i in range(m1):
        for j in range(m2):
            v = u[i, j] - u[m1 + i, j] - u[i, m2 + j] + u[m1 + i, m2 + j]
            out[i, j] = min(max(v, 0.0), 1.0)


@nb.njit(cache=True)
def interval_probs(lo, hi, out):
    for i in range(lo.size):
        out[i] = _interval_prob(lo[i], hi[i])


def _check_rho(rho: float) -> float:
    rho = float(rho)
    if not (-1.0 <= rho <= 1.0):
        raise ValueError(f"correlation {rho} outside [-1, 1]")
    return rho


def interval_prob(a: Interval) -> float:
    """P(Z in a) for a standard normal Z."""
    return float(_interval_prob(a.lo, a.hi))


def bvn_rect(a: Interval, b: Interval, rho: float) -> float:
    """Probability that a standard bivariate normal pair lies in ``a x b``.

    Parameters
    ----------
    a, b : Interval
        Ranges for the first and second coordinate.
    rho : float
        Correlation. Values with ``|rho| > 1 - 1e-12`` use the degenerate
        limit ``Z2 = sign(rho) * Z1``.

    Returns
    -------
    float
        Probability clamped to ``[0, 1]``.
    """
    rho = _check_rho(rho)
    return float(_rect_scalar(a.lo, a.hi, b.lo, b.hi, rho))


def bvn_upper(h: float, k: float, rho: float) -> float:
    """Upper orthant probability P(Z1 > h, Z2 > k)."""
    return bvn_rect(Interval(h, INF), Interval(k, INF), rho)


def gaussian_rect_prob(mean, sd, rho: float, rect: Rect2D) -> float:
    """P((X, Y) in rect) for a bivariate normal with given means, sds and correlation."""
    mx, my = (float(v) for v in mean)
    sx, sy = (float(v) for v in sd)
    if not (sx > 0 and sy > 0):
        raise ValueError("standard deviations must be positive")
    a = Interval((rect.x.lo - mx) / sx, (rect.x.hi - mx) / sx)
    b = Interval((rect.y.lo - my) / sy, (rect.y.hi - my) / sy)
    return bvn_rect(a, b, rho)


PRUNE_SDS = 9.0


@nb.njit(cache=True)
def _rect_pre(alo, ahi, blo, bhi, palo, pahi, pblo, pbhi, r, kind, nodes):
    v = (
        _bvnu_core(alo, blo, palo, pblo, r, kind, nodes)
        - _bvnu_core(ahi, blo, pahi, pblo, r, kind, nodes)
        - _bvnu_core(alo, bhi, palo, pbhi, r, kind, nodes)
        + _bvnu_core(ahi, bhi, pahi, pbhi, r, kind, nodes)
    )
    return min(max(v, 0.0), 1.0)


@nb.njit(cache=True)
def _negligible(alo, ahi, blo, bhi, r, cond_sd):
    # P(Z2 in b | Z1 = x) < Phi(-PRUNE_SDS) for every x in a
    if cond_sd <= 0.0 or not (
        math.isfinite(alo) and math.isfinite(ahi) and math.isfinite(blo) and math.isfinite(bhi)
    ):
        return False
    lo = min(r * alo, r * ahi)
    hi = max(r * alo, r * ahi)
    return blo - hi > PRUNE_SDS * cond_sd or lo - bhi > PRUNE_SDS * cond_sd


@nb.njit(cache=True)
def product_rect_block(b1, b2, m1, m2, s1, s2, r, out):
    """Probabilities of rectangle pairs for a 2-d process with independent axes.

    ``b1`` (M1, 4) and ``b2`` (M2, 4) hold ``x_lo, x_hi, y_lo, y_hi`` at the two
    times; each axis is Gaussian with means ``m1[axis]``, ``m2[axis]``, sds
    ``s1``, ``s2`` (both > 0) and correlation ``r`` across the two times.
    ``out[i, j]`` receives P(X_t in b1[i], X_s in b2[j]). Pairs bounded by
    ``Phi(-9)`` times a margin are set to 0.
    """
    kind, nodes = _prepare(r)
    cond_sd = math.sqrt(max((1.0 - r) * (1.0 + r), 0.0))
    M1 = b1.shape[0]
    M2 = b2.shape[0]
    e1 = np.empty((M1, 4))
    e2 = np.empty((M2, 4))
    f1 = np.empty((M1, 4))
    f2 = np.empty((M2, 4))
    for i in range(M1):
        for c in range(4):
            e1[i, c] = (b1[i, c] - m1[c // 2]) / s1
            f1[i, c] = _phi(-e1[i, c])
    for j in range(M2):
        for c in range(4):
            e2[j, c] = (b2[j, c] - m2[c // 2]) / s2
            f2[j, c] = _phi(-e2[j, c])
    for i in range(M1):
        for j in range(M2):
            v = 1.0
            for ax in range(2):
                c = 2 * ax
                if _negligible(e1[i, c], e1[i, c + 1], e2[j, c], e2[j, c + 1], r, cond_sd):
                    v = 0.0
                    break
                v *= _rect_pre(
                    e1[i, c], e1[i, c + 1], e2[j, c], e2[j, c + 1],
                    f1[i, c], f1[i, c + 1], f2[j, c], f2[j, c + 1],
                    r, kind, nodes,
                )
                if v == 0.0:
                    break
            out[i, j] = v
