"""Gaussian pseudo-likelihood and pairwise composite likelihood estimation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import expit, logit

from .core import (
    CountArrangement,
    Known,
    PathProbabilityTable,
    PoissonRate,
    PopulationSize,
    composite_loglik_kernel,
    ecm_mean_cov,
    log_factorial_table,
    pair_terms_kernel,
)

log = logging.getLogger(__name__)

ERRATIC_EIGENVALUE = 1e-12
# infeasible trial points score this far above the start value (relative);
# a finite, moderate wall keeps the line-search interpolation well scaled
PENALTY_GAP = 1e3
ESTIMATORS = ("mgle", "mcle")


class FitError(RuntimeError):
    """No start produced a finite objective."""


# ------------------------------------------------------------ objectives


def _flat_inputs(counts: CountArrangement, table: PathProbabilityTable):
    if counts.schedule != table.schedule:
        raise ValueError(f"counts layout {counts.schedule.m} does not match table {table.schedule.m}")
    table.require_all_pairs()
    return counts.flat(), table.schedule.time_index(), table.flat_one_time(), table.joint


def _size_args(size: PopulationSize, q: np.ndarray):
    if isinstance(size, Known):
        return size.N, False, 0.0, log_factorial_table(size.N)
    if isinstance(size, PoissonRate):
        return 0, True, size.rate, log_factorial_table(int(q.max(initial=0)))
    raise TypeError("size must be Known or PoissonRate")


_NO_MASK = np.zeros((0, 0), dtype=np.bool_)


def pairwise_composite_loglik(
    counts: CountArrangement,
    table: PathProbabilityTable,
    size: PopulationSize,
    mask: np.ndarray | None = None,
) -> float:
    """Sum of pair log-likelihoods over all unordered cell pairs.

    Same-time pairs use the trinomial (ECM) or two independent Poissons
    (ECM-Poisson); cross-time pairs use the bivariate binomial or bivariate
    Poisson. If ``mask`` is given, only pairs with ``mask[a, b]`` true are
    summed (flat cell indices, ``a < b``).
    """
    q, tidx, p, J = _flat_inputs(counts, table)
    n, poisson, lam, lf = _size_args(size, q)
    mask = _NO_MASK if mask is None else np.asarray(mask, dtype=np.bool_)
    return float(composite_loglik_kernel(q, tidx, p, J, n, poisson, lam, lf, mask))


def pair_loglik_terms(counts: CountArrangement, table: PathProbabilityTable, size: PopulationSize) -> np.ndarray:
    """Upper-triangular matrix of the individual pair log-likelihoods."""
    q, tidx, p, J = _flat_inputs(counts, table)
    n, poisson, lam, lf = _size_args(size, q)
    out = np.zeros((q.size, q.size))
    pair_terms_kernel(q, tidx, p, J, n, poisson, lam, lf, out)
    return out


def regularized_cholesky(cov: np.ndarray) -> np.ndarray | None:
    """Lower Cholesky factor, adding escalating diagonal jitter if needed.

    Jitter starts at ``1e-10 * trace / dim`` and grows by 10 up to
    ``1e-6 * trace / dim``. Returns None when all attempts fail.
    """
    cov = 0.5 * (cov + cov.T)
    if not np.all(np.isfinite(cov)):
        return None
    scale = np.trace(cov) / cov.shape[0]
    for jitter in (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6):
        try:
            c = cov if jitter == 0 else cov + jitter * scale * np.eye(cov.shape[0])
            return cholesky(c, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
    return None


def gaussian_pseudo_loglik(counts: CountArrangement, table: PathProbabilityTable, size: PopulationSize) -> float:
    """Gaussian log-density of the counts using the exact count mean and covariance.

    Returns ``-inf`` if the covariance stays singular after regularization.
    """
    q, *_ = _flat_inputs(counts, table)
    mean, cov = ecm_mean_cov(table, size)
    L = regularized_cholesky(cov)
    if L is None:
        return -math.inf
    r = solve_triangular(L, q - np.concatenate(mean), lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (q.size * math.log(2 * math.pi) + logdet + r @ r))


OBJECTIVES = {"mgle": gaussian_pseudo_loglik, "mcle": pairwise_composite_loglik}


# ------------------------------------------------------------ parameter spaces

_TRANSFORMS = {
    "identity": (lambda x: x, lambda v: v),
    "log": (math.exp, math.log),
    "logit": (lambda x: float(expit(x)), lambda v: float(logit(v))),
}


@dataclass
class ParamSpace:
    """Box-constrained parameter space on a transformed scale.

    ``lower``, ``upper`` and ``starts`` are all on the transformed scale.
    """

    names: list[str]
    transforms: list[str]
    lower: np.ndarray
    upper: np.ndarray
    starts: list[np.ndarray]

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.starts = [np.asarray(s, dtype=float) for s in self.starts]
        p = len(self.names)
        if len(self.transforms) != p or self.lower.shape != (p,) or self.upper.shape != (p,):
            raise ValueError("parameter space dimensions disagree")
        if any(t not in _TRANSFORMS for t in self.transforms):
            raise ValueError(f"transforms must be among {sorted(_TRANSFORMS)}")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("bounds must be finite")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound above upper bound")
        if not self.starts:
            raise ValueError("need at least one start")
        for s in self.starts:
            if s.shape != (p,) or np.any(s < self.lower) or np.any(s > self.upper):
                raise ValueError(f"start {s} outside the box")

    @property
    def dim(self) -> int:
        return len(self.names)

    def to_natural(self, x) -> dict[str, float]:
        return {n: _TRANSFORMS[t][0](float(v)) for n, t, v in zip(self.names, self.transforms, x)}

    def from_natural(self, values: dict[str, float]) -> np.ndarray:
        return np.array([_TRANSFORMS[t][1](float(values[n])) for n, t in zip(self.names, self.transforms)])

    def with_starts(self, starts: Sequence) -> "ParamSpace":
        return dataclasses.replace(self, starts=[np.clip(np.asarray(s, float), self.lower, self.upper) for s in starts])


def movement_study_space(
    tau: float,
    sigma: float,
    *,
    rate: float | None = None,
    rate_bounds: tuple[float, float] = (0.1, 10.0),
    extra_theta_start: bool | None = None,
) -> ParamSpace:
    """Box and multi-start points for the steady-OU simulation study.

    Parameters are ``log tau, log sigma, z1, z2`` and, when ``rate`` is given,
    ``log lam``. Starts use ``tau/2``, a zero centre, three speed settings
    (four in Poisson mode) and half the rate.
    """
    theta = sigma**2 / (2 * tau**2)
    tau0 = tau / 2
    factors = [1 / 20, 1 / 2, 5.0]
    if extra_theta_start if extra_theta_start is not None else rate is not None:
        factors.append(50.0)
    names = ["tau", "sigma", "z1", "z2"]
    transforms = ["log", "log", "identity", "identity"]
    lower = [-8.0, -8.0, -1.0, -1.0]
    upper = [6.0, 10.0, 1.0, 1.0]
    starts = [[math.log(tau0), math.log(tau0 * math.sqrt(2 * f * theta)), 0.0, 0.0] for f in factors]
    if rate is not None:
        names.append("lam")
        transforms.append("log")
        lower.append(math.log(rate * rate_bounds[0]))
        upper.append(math.log(rate * rate_bounds[1]))
        lam0 = min(max(rate / 2, rate * rate_bounds[0]), rate * rate_bounds[1])
        starts = [s + [math.log(lam0)] for s in starts]
    return ParamSpace(names, transforms, np.array(lower), np.array(upper), starts)


# ------------------------------------------------------------ results


@dataclass
class LocalOptimum:
    start_index: int
    x: list[float]
    objective: float
    converged: bool
    message: str


@dataclass
class FitResult:
    """Outcome of a multi-start fit (objective is the minimized negative log-likelihood)."""

    estimator: str
    names: list[str]
    x: list[float]
    natural: dict[str, float]
    objective: float
    hessian: list[list[float]]
    min_hessian_eigenvalue: float
    erratic: bool
    start_index: int
    converged: bool
    n_iterations: int
    n_evaluations: int
    local_optima: list[LocalOptimum] = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return -self.objective

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        d = dict(d)
        d["local_optima"] = [LocalOptimum(**o) for o in d.get("local_optima", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2)


@dataclass
class BootstrapResult:
    names: list[str]
    samples: np.ndarray
    ci_lower: dict[str, float]
    ci_upper: dict[str, float]
    n_requested: int
    n_attempted: int
    n_retained: int
    status: str = "ok"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["samples"] = np.asarray(self.samples).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BootstrapResult":
        d = dict(d)
        d["samples"] = np.asarray(d["samples"], dtype=float).reshape(-1, len(d["names"]))
        return cls(**d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


# ------------------------------------------------------------ optimization

ModelFn = Callable[[dict], tuple[PathProbabilityTable, PopulationSize]]


class Objective:
    """Negative log-likelihood on the transformed scale with an evaluation counter.

    ``loglik`` maps a dict of natural-scale parameters to a log-likelihood.
    Exceptions from invalid parameter values count as ``-inf``. Calls are
    capped at ``ceiling``, which :func:`maximize` sets per start.
    """

    def __init__(self, loglik: Callable[[dict], float], space: ParamSpace):
        self.loglik = loglik
        self.space = space
        self.n_evaluations = 0
        self.ceiling = math.inf

    def raw(self, x) -> float:
        """Negative log-likelihood, ``inf`` where the model is undefined."""
        self.n_evaluations += 1
        try:
            val = -self.loglik(self.space.to_natural(x))
        except (ValueError, OverflowError, ZeroDivisionError, FloatingPointError):
            return math.inf
        return val if math.isfinite(val) else math.inf

    def set_reference(self, f0: float) -> None:
        self.ceiling = f0 + PENALTY_GAP * (1.0 + abs(f0))

    def __call__(self, x) -> float:
        v = self.raw(x)
        return v if v < self.ceiling else self.ceiling

    def value_and_grad(self, x):
        x = np.asarray(x, dtype=float)
        f = self(x)
        g = np.empty_like(x)
        for i in range(x.size):
            h = 1e-6 * max(1.0, abs(x[i]))
            e = np.zeros_like(x)
            e[i] = h
            g[i] = (self(x + e) - self(x - e)) / (2 * h)
        return f, g


def count_objective(estimator: str, counts: CountArrangement, model_fn: ModelFn) -> Callable[[dict], float]:
    """Log-likelihood of ``counts`` as a function of natural parameters."""
    if estimator not in OBJECTIVES:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    ll = OBJECTIVES[estimator]

    def f(params: dict) -> float:
        table, size = model_fn(params)
        return ll(counts, table, size)

    return f


def finite_difference_hessian(f: Callable, x, rel_step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian with per-coordinate step ``rel_step * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    p = x.size
    h = rel_step * np.maximum(1.0, np.abs(x))
    f0 = f(x)
    H = np.empty((p, p))
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(p)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (
                4 * h[i] * h[j]
            )
    return H


def min_eigenvalue(H: np.ndarray) -> float:
    if not np.all(np.isfinite(H)):
        return math.nan
    return float(np.linalg.eigvalsh(0.5 * (H + H.T))[0])


def fit(
    estimator: str,
    counts: CountArrangement,
    model_fn: ModelFn,
    space: ParamSpace,
    *,
    maxiter: int = 500,
) -> FitResult:
    """Fit a count model by MGLE (``"mgle"``) or MCLE (``"mcle"``).

    ``model_fn`` maps natural parameters to ``(table, size)``.
    """
    return maximize(count_objective(estimator, counts, model_fn), space, label=estimator, maxiter=maxiter)


def maximize(
    loglik: Callable[[dict], float],
    space: ParamSpace,
    *,
    label: str = "custom",
    maxiter: int = 500,
) -> FitResult:
    """Multi-start box-constrained quasi-Newton maximization of a log-likelihood.

    Every start is run with L-BFGS-B on central-difference gradients. The best
    final value wins (ties go to the lowest start index). A fit is erratic
    when the smallest eigenvalue of the finite-difference Hessian of the
    negative log-likelihood is below ``1e-12`` or undefined.
    """
    obj = Objective(loglik, space)
    bounds = list(zip(space.lower, space.upper))
    optima: list[LocalOptimum] = []
    iterations = 0
    for i, x0 in enumerate(space.starts):
        f0 = obj.raw(x0)
        if not math.isfinite(f0):
            optima.append(LocalOptimum(i, list(map(float, x0)), math.inf, False, "non-finite start"))
            continue
        obj.set_reference(f0)
        res = minimize(
            obj.value_and_grad,
            x0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": maxiter, "ftol": 1e-12, "gtol": 1e-8, "maxls": 40},
        )
        iterations += int(res.nit)
        val = float(res.fun) if float(res.fun) < obj.ceiling else math.inf
        optima.append(LocalOptimum(i, [float(v) for v in res.x], val, bool(res.success), str(res.message)))
    finite = [o for o in optima if math.isfinite(o.objective)]
    if not finite:
        raise FitError("no start produced a finite objective")
    best = min(finite, key=lambda o: (o.objective, o.start_index))
    H = finite_difference_hessian(obj.raw, best.x)
    lam_min = min_eigenvalue(H)
    return FitResult(
        estimator=label,
        names=list(space.names),
        x=best.x,
        natural=space.to_natural(best.x),
        objective=best.objective,
        hessian=H.tolist(),
        min_hessian_eigenvalue=lam_min,
        erratic=not (lam_min >= ERRATIC_EIGENVALUE),
        start_index=best.start_index,
        converged=best.converged,
        n_iterations=iterations,
        n_evaluations=obj.n_evaluations,
        local_optima=optima,
    )


def parametric_bootstrap(
    fit_result: FitResult,
    regenerate: Callable[[dict, np.random.Generator], CountArrangement],
    refit: Callable[[CountArrangement], FitResult],
    n: int,
    rng_factory: Callable[[int], np.random.Generator],
    *,
    overdraw: float = 0.045,
    level: float = 0.95,
) -> BootstrapResult:
    """Percentile bootstrap from datasets simulated at the point estimate.

    Up to ``ceil(n * (1 + overdraw))`` datasets are drawn, replicate ``i``
    from ``rng_factory(i)``. Erratic refits are dropped and the first ``n``
    retained fits are kept.
    """
    if fit_result.erratic:
        raise ValueError("cannot bootstrap from an erratic fit")
    names = list(fit_result.names)
    n = int(n)
    attempts = math.ceil(n * (1 + overdraw))
    samples: list[list[float]] = []
    attempted = 0
    for i in range(attempts):
        if len(samples) >= n:
            break
        attempted += 1
        data = regenerate(fit_result.natural, rng_factory(i))
        try:
            r = refit(data)
        except FitError:
            continue
        if not r.erratic:
            samples.append([r.natural[k] for k in names])
    arr = np.asarray(samples, dtype=float).reshape(-1, len(names))
    alpha = (1 - level) / 2
    if arr.shape[0]:
        lo = np.percentile(arr, 100 * alpha, axis=0, method="inverted_cdf")
        hi = np.percentile(arr, 100 * (1 - alpha), axis=0, method="inverted_cdf")
    else:
        lo = hi = np.full(len(names), math.nan)
    status = "ok" if arr.shape[0] >= n / 2 else "warning"
    if status != "ok":
        log.warning("bootstrap retained %d of %d requested replicates", arr.shape[0], n)
    return BootstrapResult(
        names=names,
        samples=arr,
        ci_lower=dict(zip(names, map(float, lo))),
        ci_upper=dict(zip(names, map(float, hi))),
        n_requested=n,
        n_attempted=attempted,
        n_retained=int(arr.shape[0]),
        status=status,
    )
