"""Evolving-categories multinomial (ECM) and ECM-Poisson count distributions.

A population moves through ``n`` time steps. At time ``k`` every individual sits
in one of ``m_k`` categories (possibly plus an unobserved complement). Counts
``Q[k][l]`` are summarized by one-time probabilities ``p[k][l]`` and two-times
probabilities ``p[(k, k')][l, l']``.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numba as nb
import numpy as np
from scipy.special import gammaln

PROB_TOL = 1e-9
CLAMP_TOL = 1e-12
NEG_INF = -math.inf


@dataclass(frozen=True)
class Known:
    """Fixed population size ``N`` (ECM)."""

    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"population size must be a positive integer, got {self.N}")
        object.__setattr__(self, "N", int(self.N))


@dataclass(frozen=True)
class PoissonRate:
    """Poisson-distributed population size with rate ``rate`` (ECM-Poisson)."""

    rate: float

    def __post_init__(self):
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise ValueError(f"rate must be positive, got {self.rate}")
        object.__setattr__(self, "rate", float(self.rate))


PopulationSize = Union[Known, PoissonRate]


@dataclass(frozen=True)
class CategorySchedule:
    m: tuple[int, ...]

    def __post_init__(self):
        m = tuple(int(v) for v in self.m)
        if len(m) < 1 or min(m) < 1:
            raise ValueError("need at least one time and one category per time")
        object.__setattr__(self, "m", m)

    @property
    def n(self) -> int:
        return len(self.m)

    @property
    def total(self) -> int:
        return sum(self.m)

    @functools.cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.m)))

    @functools.cached_property
    def _time_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.m)

    def time_index(self) -> np.ndarray:
        return self._time_index


class CountArrangement:
    """Ragged integer counts, ``counts[k]`` of length ``m_k``."""

    def __init__(self, counts: Sequence[Sequence[int]], N: int | None = None):
        rows = []
        for row in counts:
            a = np.asarray(row)
            if a.ndim != 1:
                raise ValueError("each time needs a 1-d count vector")
            if a.size and (np.any(a < 0) or np.any(a != np.round(a))):
                raise ValueError("counts must be non-negative integers")
            rows.append(a.astype(np.int64))
        self.schedule = CategorySchedule(tuple(r.size for r in rows))
        self.counts = rows
        if N is not None:
            for k, r in enumerate(rows):
                if r.sum() > N:
                    raise ValueError(f"time {k} holds {r.sum()} > N={N} individuals")

    @classmethod
    def from_flat(cls, flat, schedule: CategorySchedule) -> "CountArrangement":
        off = schedule.offsets
        flat = np.asarray(flat)
        return cls([flat[off[k] : off[k + 1]] for k in range(schedule.n)])

    def flat(self) -> np.ndarray:
        return np.concatenate(self.counts)

    def totals(self) -> np.ndarray:
        return np.array([r.sum() for r in self.counts])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CountArrangement)
            and self.schedule == other.schedule
            and all(np.array_equal(a, b) for a, b in zip(self.counts, other.counts))
        )

    def __repr__(self) -> str:
        return f"CountArrangement(m={self.schedule.m}, total={int(self.flat().sum())})"


class PathProbabilityTable:
    """One-time and two-times category probabilities.

    Two-times blocks are stored in a dense symmetric matrix over all flattened
    cells; same-time blocks of that matrix are unused. ``filled[k, k']`` marks
    which time pairs were computed.
    """

    def __init__(self, one_time, two_times: dict | None = None, *, validate: bool = True):
        self.one_time = [np.asarray(p, dtype=float).copy() for p in one_time]
        self.schedule = CategorySchedule(tuple(p.size for p in self.one_time))
        n, M = self.schedule.n, self.schedule.total
        self.joint = np.zeros((M, M))
        self.filled = np.zeros((n, n), dtype=bool)
        for (k, kk), block in (two_times or {}).items():
            self.set_block(k, kk, block)
        if validate:
            self.validate()

    def _slice(self, k: int) -> slice:
        off = self.schedule.offsets
        return slice(off[k], off[k + 1])

    def set_block(self, k: int, kk: int, block) -> None:
        if k == kk:
            raise ValueError("two-times blocks need distinct times")
        block = np.asarray(block, dtype=float)
        if k > kk:
            k, kk, block = kk, k, block.T
        if block.shape != (self.schedule.m[k], self.schedule.m[kk]):
            raise ValueError(f"block ({k},{kk}) has shape {block.shape}")
        self.joint[self._slice(k), self._slice(kk)] = block
        self.joint[self._slice(kk), self._slice(k)] = block.T
        self.filled[k, kk] = self.filled[kk, k] = True

    @property
    def two_times(self) -> dict:
        n = self.schedule.n
        return {
            (k, kk): self.joint[self._slice(k), self._slice(kk)]
            for k in range(n)
            for kk in range(k + 1, n)
            if self.filled[k, kk]
        }

    def block(self, k: int, kk: int) -> np.ndarray:
        if not self.filled[k, kk]:
            raise KeyError(f"two-times probabilities for ({k},{kk}) not available")
        return self.joint[self._slice(k), self._slice(kk)]

    def flat_one_time(self) -> np.ndarray:
        return np.concatenate(self.one_time)

    def require_all_pairs(self) -> None:
        n = self.schedule.n
        missing = [
            (k, kk) for k in range(n) for kk in range(k + 1, n) if not self.filled[k, kk]
        ]
        if missing:
            raise KeyError(f"missing two-times probabilities for {missing[:5]}")

    def conditional(self, k: int, kk: int) -> np.ndarray:
        """Transition matrix ``p[l' | l]`` from time ``k`` to ``kk``.

        Rows with ``p[k][l] == 0`` are returned as zeros; such a category never
        holds anyone.
        """
        block = self.block(k, kk)
        p = self.one_time[k]
        out = np.zeros_like(block)
        pos = p > 0
        out[pos] = block[pos] / p[pos, None]
        return out

    def validate(self, tol: float = PROB_TOL) -> None:
        """Check probability invariants, clamping tiny negative noise to 0."""
        for k, p in enumerate(self.one_time):
            p[(p < 0) & (p > -CLAMP_TOL)] = 0.0
            if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1 + tol):
                raise ValueError(f"one-time probabilities at time {k} outside [0,1]")
            if p.sum() > 1 + tol:
                raise ValueError(f"one-time probabilities at time {k} sum to {p.sum()}")
        J = self.joint
        J[(J < 0) & (J > -CLAMP_TOL)] = 0.0
        for (k, kk), block in self.two_times.items():
            pk, pkk = self.one_time[k], self.one_time[kk]
            if np.any(~np.isfinite(block)) or np.any(block < 0):
                raise ValueError(f"invalid two-times probabilities for ({k},{kk})")
            if np.any(block > np.minimum.outer(pk, pkk) + tol):
                raise ValueError(f"two-times probabilities for ({k},{kk}) exceed margins")
            if np.any(block.sum(1) > pk + tol) or np.any(block.sum(0) > pkk + tol):
                raise ValueError(f"two-times sums for ({k},{kk}) exceed margins")


def _check_size(size: PopulationSize) -> None:
    if not isinstance(size, (Known, PoissonRate)):
        raise TypeError("size must be Known or PoissonRate")


def ecm_mean_cov(table: PathProbabilityTable, size: PopulationSize):
    """Mean (ragged) and covariance (flattened cells) of ECM / ECM-Poisson counts.

    Returns
    -------
    mean : list of ndarray
    cov : ndarray, shape (M, M)
        Exactly symmetric.
    """
    _check_size(size)
    table.require_all_pairs()
    p = table.flat_one_time()
    tidx = table.schedule.time_index()
    same = tidx[:, None] == tidx[None, :]
    if isinstance(size, Known):
        c = size.N
        cov = np.where(same, -np.outer(p, p), table.joint - np.outer(p, p))
        cov[np.diag_indices_from(cov)] = p * (1 - p)
    else:
        c = size.rate
        cov = np.where(same, 0.0, table.joint)
        cov[np.diag_indices_from(cov)] = p
    cov = c * cov
    cov = 0.5 * (cov + cov.T)
    mean = [c * q for q in table.one_time]
    return mean, cov


# ---------------------------------------------------------------- pair kernels


@nb.njit(cache=True)
def _lf(n, table):
    if n < table.size:
        return table[n]
    return math.lgamma(n + 1.0)


@nb.njit(cache=True)
def _xlogy(x, y):
    if x == 0:
        return 0.0
    if y <= 0.0:
        return -np.inf
    return x * math.log(y)


@nb.njit(cache=True)
def _bvbinom(q1, q2, n, a, b, c, d, lf):
    """log pmf of a bivariate binomial with cell probabilities a=(1,1), b=(1,0), c=(0,1), d=(0,0)."""
    if q1 < 0 or q2 < 0 or q1 > n or q2 > n:
        return -np.inf
    jlo = max(0, q1 + q2 - n)
    jhi = min(q1, q2)
    if a <= 0.0:
        jhi = min(jhi, 0)
    if b <= 0.0:
        jlo = max(jlo, q1)
    if c <= 0.0:
        jlo = max(jlo, q2)
    if d <= 0.0:
        jhi = min(jhi, q1 + q2 - n)
    if jlo > jhi:
        return -np.inf
    s = n - q1 - q2
    jm = jlo
    lrc = 0.0
    if jlo < jhi:
        lrc = math.log(a) + math.log(d) - math.log(b) - math.log(c)
        # term ratios t(j+1)/t(j) decrease in j: bisect for the mode
        lo, hi = jlo, jhi
        while lo < hi:
            mid = (lo + hi) // 2
            lr = (
                math.log(q1 - mid)
                + math.log(q2 - mid)
                - math.log(mid + 1)
                - math.log(s + mid + 1)
                + lrc
            )
            if lr > 0.0:
                lo = mid + 1
            else:
                hi = mid
        jm = lo
    logt = (
        _lf(n, lf)
        - _lf(s + jm, lf)
        - _lf(q1 - jm, lf)
        - _lf(q2 - jm, lf)
        - _lf(jm, lf)
        + _xlogy(jm, a)
        + _xlogy(q1 - jm, b)
        + _xlogy(q2 - jm, c)
        + _xlogy(s + jm, d)
    )
    if jlo == jhi:
        return logt
    fast = abs(lrc) < 600.0
    rc = math.exp(lrc) if fast else 0.0
    total = 1.0
    t = 1.0
    j = jm
    while j < jhi:
        f = (q1 - j) * (q2 - j) / ((j + 1.0) * (s + j + 1.0))
        t *= f * rc if fast else math.exp(math.log(f) + lrc)
        j += 1
        total += t
        if t < 1e-20 * total:
            break
    t = 1.0
    j = jm
    while j > jlo:
        f = j * (s + j) / ((q1 - j + 1.0) * (q2 - j + 1.0))
        t *= f / rc if fast else math.exp(math.log(f) - lrc)
        j -= 1
        total += t
        if t < 1e-20 * total:
            break
    return logt + math.log(total)


@nb.njit(cache=True)
def _bvpois(q1, q2, u, v, w, lf):
    """log pmf of a bivariate Poisson X = U + W, Y = V + W with rates u, v, w."""
    if q1 < 0 or q2 < 0:
        return -np.inf
    jlo = 0
    jhi = min(q1, q2)
    if w <= 0.0:
        jhi = 0
    if u <= 0.0:
        jlo = max(jlo, q1)
    if v <= 0.0:
        jlo = max(jlo, q2)
    if jlo > jhi:
        return -np.inf
    jm = jlo
    lrc = 0.0
    if jlo < jhi:
        lrc = math.log(w) - math.log(u) - math.log(v)
        lo, hi = jlo, jhi
        while lo < hi:
            mid = (lo + hi) // 2
            lr = math.log(q1 - mid) + math.log(q2 - mid) - math.log(mid + 1) + lrc
            if lr > 0.0:
                lo = mid + 1
            else:
                hi = mid
        jm = lo
    logt = (
        -(u + v + w)
        + _xlogy(q1 - jm, u)
        - _lf(q1 - jm, lf)
        + _xlogy(q2 - jm, v)
        - _lf(q2 - jm, lf)
        + _xlogy(jm, w)
        - _lf(jm, lf)
    )
    if jlo == jhi:
        return logt
    fast = abs(lrc) < 600.0
    rc = math.exp(lrc) if fast else 0.0
    total = 1.0
    t = 1.0
    j = jm
    while j < jhi:
        f = (q1 - j) * (q2 - j) / (j + 1.0)
        t *= f * rc if fast else math.exp(math.log(f) + lrc)
        j += 1
        total += t
        if t < 1e-20 * total:
            break
    t = 1.0
    j = jm
    while j > jlo:
        f = j / ((q1 - j + 1.0) * (q2 - j + 1.0))
        t *= f / rc if fast else math.exp(math.log(f) - lrc)
        j -= 1
        total += t
        if t < 1e-20 * total:
            break
    return logt + math.log(total)


@nb.njit(cache=True)
def _trinom(q1, q2, n, p1, p2, lf):
    if q1 < 0 or q2 < 0 or q1 + q2 > n:
        return -np.inf
    p3 = max(1.0 - p1 - p2, 0.0)
    r = n - q1 - q2
    return (
        _lf(n, lf)
        - _lf(q1, lf)
        - _lf(q2, lf)
        - _lf(r, lf)
        + _xlogy(q1, p1)
        + _xlogy(q2, p2)
        + _xlogy(r, p3)
    )


@nb.njit(cache=True)
def _pois(q, mu, lf):
    if q < 0:
        return -np.inf
    return _xlogy(q, mu) - mu - _lf(q, lf)


@nb.njit(cache=True)
def _cross_cells(pa, pb, pj):
    pj = min(max(pj, 0.0), pa, pb)
    b = max(pa - pj, 0.0)
    c = max(pb - pj, 0.0)
    d = max(1.0 - pa - pb + pj, 0.0)
    return pj, b, c, d


@nb.njit(cache=True)
def _pair_term(a, b, q, tidx, p, J, n, poisson, lam, lf):
    if tidx[a] == tidx[b]:
        if poisson:
            return _pois(q[a], lam * p[a], lf) + _pois(q[b], lam * p[b], lf)
        return _trinom(q[a], q[b], n, p[a], p[b], lf)
    pj, pb_, pc, pd = _cross_cells(p[a], p[b], J[a, b])
    if poisson:
        return _bvpois(q[a], q[b], lam * pb_, lam * pc, lam * pj, lf)
    return _bvbinom(q[a], q[b], n, pj, pb_, pc, pd, lf)


@nb.njit(cache=True)
def composite_loglik_kernel(q, tidx, p, J, n, poisson, lam, lf, mask):
    """Sum of pair log-pmfs over all unordered cell pairs with ``mask[a, b]`` true."""
    M = q.size
    total = 0.0
    use_mask = mask.shape[0] == M
    for a in range(M):
        for b in range(a + 1, M):
            if use_mask and not mask[a, b]:
                continue
            total += _pair_term(a, b, q, tidx, p, J, n, poisson, lam, lf)
            if total == -np.inf:
                return total
    return total


@nb.njit(cache=True)
def pair_terms_kernel(q, tidx, p, J, n, poisson, lam, lf, out):
    M = q.size
    for a in range(M):
        for b in range(a + 1, M):
            out[a, b] = _pair_term(a, b, q, tidx, p, J, n, poisson, lam, lf)


_EMPTY_LF = np.zeros(0)


def log_factorial_table(n: int) -> np.ndarray:
    return gammaln(np.arange(int(n) + 1) + 1.0)


def _check_prob(x: float, name: str) -> float:
    x = float(x)
    if -CLAMP_TOL < x < 0:
        x = 0.0
    if not (0.0 <= x <= 1.0 + PROB_TOL):
        raise ValueError(f"{name}={x} is not a probability")
    return min(x, 1.0)


def _check_count(q) -> int:
    if int(q) != q:
        raise ValueError(f"count {q} is not an integer")
    return int(q)


def bivariate_binomial_logpmf(q: int, q2: int, N: int, p_joint: float, p1: float, p2: float) -> float:
    """Log pmf of the counts of two overlapping events among ``N`` independent trials.

    Each trial falls in event 1 with probability ``p1``, in event 2 with
    probability ``p2`` and in both with probability ``p_joint``. Impossible
    outcomes give ``-inf``.
    """
    q, q2, N = _check_count(q), _check_count(q2), _check_count(N)
    p_joint, p1, p2 = (_check_prob(v, n) for v, n in ((p_joint, "p_joint"), (p1, "p1"), (p2, "p2")))
    if N < 0:
        raise ValueError("N must be non-negative")
    if p_joint > min(p1, p2) + PROB_TOL or p1 + p2 - p_joint > 1 + PROB_TOL:
        raise ValueError("inconsistent bivariate binomial probabilities")
    if q < 0 or q2 < 0 or q > N or q2 > N:
        raise ValueError(f"counts ({q},{q2}) outside 0..{N}")
    a, b, c, d = _cross_cells(p1, p2, p_joint)
    return float(_bvbinom(q, q2, N, a, b, c, d, _EMPTY_LF))


def bivariate_poisson_logpmf(q: int, q2: int, rate_joint: float, rate1: float, rate2: float) -> float:
    """Log pmf of ``(U + W, V + W)`` with independent Poisson U, V, W.

    ``rate1`` and ``rate2`` are the marginal rates, ``rate_joint`` the rate of W.
    """
    q, q2 = _check_count(q), _check_count(q2)
    if min(rate_joint, rate1, rate2) < 0:
        raise ValueError("rates must be non-negative")
    if rate_joint > min(rate1, rate2) * (1 + PROB_TOL) + CLAMP_TOL:
        raise ValueError("joint rate exceeds a marginal rate")
    if q < 0 or q2 < 0:
        return NEG_INF
    w = min(rate_joint, rate1, rate2)
    return float(_bvpois(q, q2, max(rate1 - w, 0.0), max(rate2 - w, 0.0), w, _EMPTY_LF))


def multinomial_pair_logpmf(q: int, q2: int, N: int, p1: float, p2: float) -> float:
    """Log pmf of two cells of a multinomial (trinomial with the rest lumped)."""
    q, q2, N = _check_count(q), _check_count(q2), _check_count(N)
    p1, p2 = _check_prob(p1, "p1"), _check_prob(p2, "p2")
    if p1 + p2 > 1 + PROB_TOL:
        raise ValueError("p1 + p2 exceeds 1")
    return float(_trinom(q, q2, N, p1, p2, _EMPTY_LF))


def bivariate_binomial_pmf(*args) -> float:
    return math.exp(bivariate_binomial_logpmf(*args))


def bivariate_poisson_pmf(*args) -> float:
    return math.exp(bivariate_poisson_logpmf(*args))


def multinomial_pair_pmf(*args) -> float:
    return math.exp(multinomial_pair_logpmf(*args))


# ---------------------------------------------------------------- samplers


def _check_rows(cond: np.ndarray, active: np.ndarray | None = None) -> np.ndarray:
    cond = np.asarray(cond, dtype=float)
    if cond.ndim != 2 or np.any(cond < 0):
        raise ValueError("transition matrix must be 2-d and non-negative")
    sums = cond.sum(1)
    rows = np.ones(cond.shape[0], bool) if active is None else active
    if np.any(np.abs(sums[rows] - 1.0) > 1e-12):
        raise ValueError("transition rows must sum to 1")
    return cond


def sample_conditional_next(counts_k, cond, rng: np.random.Generator) -> np.ndarray:
    """Move each category's occupants independently with transition matrix ``cond``.

    Rows of categories with zero occupants are not checked.
    """
    counts_k = np.asarray(counts_k, dtype=np.int64)
    if np.any(counts_k < 0):
        raise ValueError("counts must be non-negative")
    cond = _check_rows(cond, counts_k > 0)
    out = np.zeros(cond.shape[1], dtype=np.int64)
    for n_l, row in zip(counts_k, cond):
        if n_l > 0:
            out += rng.multinomial(n_l, row / row.sum())
    return out


def sample_conditional_next_poisson(observed_counts, cond, complement_rates, rng) -> np.ndarray:
    """Transitions of observed occupants plus Poisson arrivals from the unobserved complement."""
    rates = np.asarray(complement_rates, dtype=float)
    if np.any(rates < 0):
        raise ValueError("complement rates must be non-negative")
    observed_counts = np.asarray(observed_counts, dtype=np.int64)
    out = rng.poisson(rates).astype(np.int64)
    if observed_counts.size:
        out += sample_conditional_next(observed_counts, cond, rng)
    return out


def poisson_multinomial_logpmf_bruteforce(sizes, probs, target) -> float:
    """Exact log pmf of a sum of independent multinomials by convolution.

    Oracle for small instances: total size at most 1000 and at most 4 targets.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    target = np.asarray(target, dtype=np.int64)
    m2 = probs.shape[1]
    total = int(sizes.sum())
    if total > 1000 or m2 > 4:
        raise ValueError("instance exceeds oracle scale (total <= 1000, m2 <= 4)")
    if target.size != m2 or probs.shape[0] != sizes.size:
        raise ValueError("dimension mismatch")
    if target.sum() != total or np.any(target < 0):
        return NEG_INF
    # distribution over the first m2-1 coordinates, truncated at the target
    shape = tuple(int(t) + 1 for t in target[:-1])
    dist = np.zeros(shape)
    dist[(0,) * len(shape)] = 1.0
    for n_l, row in zip(sizes, probs):
        for _ in range(int(n_l)):
            new = dist * row[-1]
            for j in range(m2 - 1):
                sl_src = tuple(slice(0, s - 1) if i == j else slice(None) for i, s in enumerate(shape))
                sl_dst = tuple(slice(1, None) if i == j else slice(None) for i, s in enumerate(shape))
                new[sl_dst] += dist[sl_src] * row[j]
            dist = new
    val = dist[tuple(target[:-1])] if shape else dist[()]
    return math.log(val) if val > 0 else NEG_INF


def ecm_char_function(path_probs, size: PopulationSize, xi) -> complex:
    """Characteristic function of the counts, given full-path probabilities.

    Parameters
    ----------
    path_probs : ndarray, shape (m_1, ..., m_n)
        Probability of every category path; must sum to 1.
    size : Known or PoissonRate
    xi : sequence of arrays
        ``xi[k]`` has length ``m_k``.
    """
    P = np.asarray(path_probs, dtype=float)
    if abs(P.sum() - 1.0) > 1e-10:
        raise ValueError("path probabilities must sum to 1")
    if len(xi) != P.ndim:
        raise ValueError("dimension mismatch")
    phase = np.zeros(P.shape)
    for k, x in enumerate(xi):
        x = np.asarray(x, dtype=float)
        if x.size != P.shape[k]:
            raise ValueError("dimension mismatch")
        shape = [1] * P.ndim
        shape[k] = -1
        phase = phase + x.reshape(shape)
    s = np.sum(P * np.exp(1j * phase))
    if isinstance(size, Known):
        return complex(s**size.N)
    return complex(np.exp(size.rate * (s - 1.0)))


def ecm_pmf_bruteforce(path_probs, N: int) -> dict:
    """Exact pmf of the count arrangement by enumerating individual paths (tiny cases)."""
    P = np.asarray(path_probs, dtype=float)
    paths = list(itertools.product(*(range(m) for m in P.shape)))
    out: dict = {}
    for combo in itertools.combinations_with_replacement(range(len(paths)), N):
        idx, mult = np.unique(combo, return_counts=True)
        logp = gammaln(N + 1) - gammaln(mult + 1).sum()
        pr = math.exp(logp) * np.prod([P[paths[i]] ** c for i, c in zip(idx, mult)])
        key = tuple(
            tuple(int(sum(c for i, c in zip(idx, mult) if paths[i][k] == l)) for l in range(P.shape[k]))
            for k in range(P.ndim)
        )
        out[key] = out.get(key, 0.0) + pr
    return out
