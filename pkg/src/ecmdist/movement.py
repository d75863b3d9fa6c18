"""Gaussian trajectory models and their cell probabilities.

All models have independent, identically distributed coordinates, so each
rectangle probability factors into per-axis interval probabilities.

Conditioned OU covariance. The steady OU with ``theta = sigma^2 / (2 tau^2)``
has ``Cov(X_t, X_s) = tau^2 exp(-theta |t - s|)``. Conditioning on
``X(t0) = x0`` subtracts ``Cov(X_t, X_t0) Cov(X_s, X_t0) / tau^2``::

    mean(t)    = z + (x0 - z) exp(-theta (t - t0))
    cov(t, s)  = tau^2 (exp(-theta |t - s|) - exp(-theta (t + s - 2 t0)))
               = tau^2 exp(-theta |t - s|) (1 - exp(-2 theta (min(t, s) - t0)))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import gaussprob as gp
from .core import PROB_TOL, PathProbabilityTable
from .gaussprob import Interval, Rect2D


def _point(v) -> tuple[float, float]:
    a = tuple(float(x) for x in v)
    if len(a) != 2 or not all(math.isfinite(x) for x in a):
        raise ValueError(f"expected a finite 2-d point, got {v}")
    return a


@dataclass(frozen=True)
class OUParams:
    """Steady-state OU: home-range scale ``tau``, speed scale ``sigma``, centre ``z``."""

    tau: float
    sigma: float
    z: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.tau > 0 and self.sigma > 0):
            raise ValueError("tau and sigma must be positive")
        object.__setattr__(self, "z", _point(self.z))

    @property
    def theta(self) -> float:
        return self.sigma**2 / (2.0 * self.tau**2)


@dataclass(frozen=True)
class ConditionedOUParams:
    """OU started at ``x0`` at time ``t0``."""

    base: OUParams
    t0: float
    x0: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "x0", _point(self.x0))


@dataclass(frozen=True)
class BrownianParams:
    sigma: float
    t0: float
    x0: tuple[float, float]

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "x0", _point(self.x0))


@dataclass(frozen=True)
class MixtureParams:
    """Fraction ``alpha`` of Brownian explorers, the rest conditioned OU."""

    alpha: float
    brownian: BrownianParams
    ou: ConditionedOUParams

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        b, o = self.brownian, self.ou
        if b.sigma != o.base.sigma or b.t0 != o.t0 or b.x0 != o.x0:
            raise ValueError("mixture components must share sigma, t0 and x0")

    @classmethod
    def build(cls, alpha, tau, sigma, z, t0, x0) -> "MixtureParams":
        return cls(alpha, BrownianParams(sigma, t0, x0), ConditionedOUParams(OUParams(tau, sigma, z), t0, x0))


MovementModel = Union[OUParams, ConditionedOUParams, BrownianParams, MixtureParams]


@dataclass
class SurveyDesign:
    """Survey times and, per time, disjoint rectangular cells.

    ``bounds[k]`` is an ``(m_k, 4)`` array of ``x_lo, x_hi, y_lo, y_hi``.
    """

    times: np.ndarray
    bounds: list = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.bounds = [np.asarray(b, dtype=float).reshape(-1, 4) for b in self.bounds]
        if self.times.size < 1 or np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if len(self.bounds) != self.times.size:
            raise ValueError("need one cell list per time")
        for k, b in enumerate(self.bounds):
            if b.shape[0] < 1:
                raise ValueError(f"time {k} has no cells")
            if np.any(np.isnan(b)) or np.any(b[:, 0] > b[:, 1]) or np.any(b[:, 2] > b[:, 3]):
                raise ValueError(f"invalid cell bounds at time {k}")
            if _any_overlap(b):
                raise ValueError(f"cells overlap at time {k}")

    @classmethod
    def from_rects(cls, times, cells: Sequence[Sequence[Rect2D]]) -> "SurveyDesign":
        return cls(times, [np.array([r.bounds() for r in row]) for row in cells])

    @property
    def cells(self) -> list[list[Rect2D]]:
        return [[Rect2D.from_bounds(*row) for row in b] for b in self.bounds]

    @property
    def m(self) -> tuple[int, ...]:
        return tuple(b.shape[0] for b in self.bounds)


def _any_overlap(b: np.ndarray) -> bool:
    ox = (b[:, None, 0] < b[None, :, 1]) & (b[None, :, 0] < b[:, None, 1])
    oy = (b[:, None, 2] < b[None, :, 3]) & (b[None, :, 2] < b[:, None, 3])
    o = ox & oy
    np.fill_diagonal(o, False)
    return bool(o.any())


# ------------------------------------------------------------ Gaussian laws


@dataclass
class GaussianLaw:
    """Per-axis Gaussian law of a trajectory at a set of times.

    ``means`` has shape (n, 2); ``sds`` shape (n,); ``corr`` shape (n, n).
    """

    weight: float
    means: np.ndarray
    sds: np.ndarray
    corr: np.ndarray


def _elapsed(t0: float, times: np.ndarray) -> np.ndarray:
    d = times - t0
    if np.any(d < 0):
        raise ValueError("times before the start time t0")
    return d


def _cond_ou_law(p: ConditionedOUParams, times: np.ndarray, weight: float = 1.0) -> GaussianLaw:
    b = p.base
    th = b.theta
    d = _elapsed(p.t0, times)
    decay = np.exp(-th * d)
    z, x0 = np.array(b.z), np.array(p.x0)
    means = z[None, :] + (x0 - z)[None, :] * decay[:, None]
    var = b.tau**2 * -np.expm1(-2 * th * d)
    sds = np.sqrt(var)
    lag = np.abs(times[:, None] - times[None, :])
    cov = b.tau**2 * np.exp(-th * lag) * -np.expm1(-2 * th * np.minimum.outer(d, d))
    corr = _normalize(cov, sds)
    return GaussianLaw(weight, means, sds, corr)


def _brownian_law(p: BrownianParams, times: np.ndarray, weight: float = 1.0) -> GaussianLaw:
    d = _elapsed(p.t0, times)
    means = np.tile(np.array(p.x0), (times.size, 1))
    sds = p.sigma * np.sqrt(d)
    lo, hi = np.minimum.outer(d, d), np.maximum.outer(d, d)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(hi > 0, np.sqrt(lo / np.where(hi > 0, hi, 1.0)), 0.0)
    corr = np.where(lo > 0, corr, 0.0)
    np.fill_diagonal(corr, 1.0)
    return GaussianLaw(weight, means, sds, corr)


def _normalize(cov: np.ndarray, sds: np.ndarray) -> np.ndarray:
    outer = np.outer(sds, sds)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(outer > 0, cov / np.where(outer > 0, outer, 1.0), 0.0)
    corr = np.clip(corr, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def gaussian_laws(model: MovementModel, times) -> list[GaussianLaw]:
    """Mixture components of the model's Gaussian law at ``times``."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if isinstance(model, OUParams):
        lag = np.abs(times[:, None] - times[None, :])
        return [
            GaussianLaw(
                1.0,
                np.tile(np.array(model.z), (times.size, 1)),
                np.full(times.size, model.tau),
                np.exp(-model.theta * lag),
            )
        ]
    if isinstance(model, ConditionedOUParams):
        return [_cond_ou_law(model, times)]
    if isinstance(model, BrownianParams):
        return [_brownian_law(model, times)]
    if isinstance(model, MixtureParams):
        laws = []
        if model.alpha > 0:
            laws.append(_brownian_law(model.brownian, times, model.alpha))
        if model.alpha < 1:
            laws.append(_cond_ou_law(model.ou, times, 1.0 - model.alpha))
        return laws
    raise TypeError(f"unsupported movement model {type(model).__name__}")


def model_covariance(model: MovementModel, t: float, s: float) -> float:
    """Per-axis covariance Cov(X_t, X_s) (mixtures: total covariance)."""
    laws = gaussian_laws(model, [t, s])
    m1 = sum(L.weight * L.means[0, 0] for L in laws)
    m2 = sum(L.weight * L.means[1, 0] for L in laws)
    return sum(
        L.weight * (L.corr[0, 1] * L.sds[0] * L.sds[1] + L.means[0, 0] * L.means[1, 0]) for L in laws
    ) - m1 * m2


def ou_marginal(params: OUParams | ConditionedOUParams, t: float):
    """Per-axis mean (2,) and common sd at time ``t``."""
    if not isinstance(params, (OUParams, ConditionedOUParams)):
        raise TypeError("expected OU parameters")
    (law,) = gaussian_laws(params, [t])
    return law.means[0], float(law.sds[0])


def ou_pair_correlation(params: OUParams | ConditionedOUParams, t: float, s: float) -> float:
    if not isinstance(params, (OUParams, ConditionedOUParams)):
        raise TypeError("expected OU parameters")
    if t == s:
        if isinstance(params, ConditionedOUParams):
            _elapsed(params.t0, np.array([t]))
        return 1.0
    (law,) = gaussian_laws(params, [t, s])
    return float(law.corr[0, 1])


def brownian_marginal(params: BrownianParams, t: float):
    (law,) = gaussian_laws(params, [t])
    return law.means[0], float(law.sds[0])


def brownian_pair(params: BrownianParams, t: float, s: float):
    """Means, sds and correlation of ``(X_t, X_s)`` per axis (correlation 0 if degenerate)."""
    if t == s:
        m, sd = brownian_marginal(params, t)
        return m, m, sd, sd, 1.0
    (law,) = gaussian_laws(params, [t, s])
    return law.means[0], law.means[1], float(law.sds[0]), float(law.sds[1]), float(law.corr[0, 1])


# ------------------------------------------------------------ cell probabilities


def _axis_probs(lo, hi, mean: float, sd: float) -> np.ndarray:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if sd == 0:
        return ((lo <= mean) & (mean < hi)).astype(float)
    out = np.empty(lo.size)
    gp.interval_probs((lo - mean) / sd, (hi - mean) / sd, out)
    return out


def _axis_pair_probs(lo1, hi1, lo2, hi2, m1, m2, s1, s2, rho) -> np.ndarray:
    if s1 == 0 or s2 == 0:
        return np.outer(_axis_probs(lo1, hi1, m1, s1), _axis_probs(lo2, hi2, m2, s2))
    out = np.empty((lo1.size, lo2.size))
    gp.rect_grid((lo1 - m1) / s1, (hi1 - m1) / s1, (lo2 - m2) / s2, (hi2 - m2) / s2, float(rho), out)
    return out


def _one_time_block(laws, k, b) -> np.ndarray:
    total = np.zeros(b.shape[0])
    for L in laws:
        px = _axis_probs(b[:, 0], b[:, 1], L.means[k, 0], L.sds[k])
        py = _axis_probs(b[:, 2], b[:, 3], L.means[k, 1], L.sds[k])
        total += L.weight * px * py
    return total


def _two_times_block(laws, k, kk, b1, b2) -> np.ndarray:
    total = np.zeros((b1.shape[0], b2.shape[0]))
    for L in laws:
        s1, s2, r = L.sds[k], L.sds[kk], L.corr[k, kk]
        if s1 > 0 and s2 > 0:
            block = np.empty_like(total)
            gp.product_rect_block(b1, b2, L.means[k], L.means[kk], s1, s2, float(r), block)
            total += L.weight * block
            continue
        px = _axis_pair_probs(b1[:, 0], b1[:, 1], b2[:, 0], b2[:, 1], L.means[k, 0], L.means[kk, 0], s1, s2, r)
        py = _axis_pair_probs(b1[:, 2], b1[:, 3], b2[:, 2], b2[:, 3], L.means[k, 1], L.means[kk, 1], s1, s2, r)
        total += L.weight * px * py
    return total


def cell_probability(model: MovementModel, t: float, cell: Rect2D) -> float:
    laws = gaussian_laws(model, [t])
    return float(_one_time_block(laws, 0, np.array([cell.bounds()]))[0])


def pair_cell_probability(model: MovementModel, t: float, cell_a: Rect2D, s: float, cell_b: Rect2D) -> float:
    """P(X_t in cell_a, X_s in cell_b) for ``t != s``."""
    if t == s:
        raise ValueError("pair probabilities need two distinct times")
    laws = gaussian_laws(model, [t, s])
    block = _two_times_block(laws, 0, 1, np.array([cell_a.bounds()]), np.array([cell_b.bounds()]))
    return float(block[0, 0])


def build_path_table(model: MovementModel, design: SurveyDesign, pairs="all") -> PathProbabilityTable:
    """One-time and two-times probabilities of the design's cells under ``model``.

    ``pairs`` is ``"all"`` or an iterable of ``(k, k')`` time-index pairs.
    """
    laws = gaussian_laws(model, design.times)
    n = design.times.size
    one = [_one_time_block(laws, k, design.bounds[k]) for k in range(n)]
    if pairs == "all":
        pairs = [(k, kk) for k in range(n) for kk in range(k + 1, n)]
    two = {}
    for k, kk in pairs:
        if k == kk:
            raise ValueError("pair times must differ")
        k, kk = min(k, kk), max(k, kk)
        two[(k, kk)] = _two_times_block(laws, k, kk, design.bounds[k], design.bounds[kk])
    table = PathProbabilityTable(one, two, validate=False)
    table.validate(PROB_TOL)
    return table


# ------------------------------------------------------------ registry

FAMILIES: dict[str, tuple[str, ...]] = {
    "steady_ou": ("tau", "sigma", "z1", "z2"),
    "conditioned_ou": ("tau", "sigma", "z1", "z2", "x01", "x02", "release_lag"),
    "brownian": ("sigma", "x01", "x02", "release_lag"),
    "mixture": ("tau", "sigma", "z1", "z2", "x01", "x02", "release_lag", "alpha"),
}


def build_model(family: str, params: dict, times) -> MovementModel:
    """Instantiate a registered family from named parameters.

    The start time is ``times[0] - release_lag`` so that it can be estimated
    without ever passing the first survey time.
    """
    try:
        names = FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown movement family {family!r}; choose from {sorted(FAMILIES)}") from None
    missing = [n for n in names if n not in params]
    if missing:
        raise ValueError(f"missing parameters for {family}: {missing}")
    g = {n: float(params[n]) for n in names}
    if family == "steady_ou":
        return OUParams(g["tau"], g["sigma"], (g["z1"], g["z2"]))
    t0 = float(np.min(times)) - g["release_lag"]
    x0 = (g["x01"], g["x02"])
    if family == "brownian":
        return BrownianParams(g["sigma"], t0, x0)
    if family == "conditioned_ou":
        return ConditionedOUParams(OUParams(g["tau"], g["sigma"], (g["z1"], g["z2"])), t0, x0)
    return MixtureParams.build(g["alpha"], g["tau"], g["sigma"], (g["z1"], g["z2"]), t0, x0)


__all__ = [
    "FAMILIES",
    "build_model",
    "OUParams",
    "ConditionedOUParams",
    "BrownianParams",
    "MixtureParams",
    "MovementModel",
    "SurveyDesign",
    "Interval",
    "Rect2D",
    "gaussian_laws",
    "model_covariance",
    "ou_marginal",
    "ou_pair_correlation",
    "brownian_marginal",
    "brownian_pair",
    "cell_probability",
    "pair_cell_probability",
    "build_path_table",
]
