"""Two-round vote transfer estimation from district totals.

Given first-round counts per district, second-round counts are a sum of
independent multinomials with a common row-stochastic transfer matrix ``T``
(``m1`` sources, three destinations: two candidates and abstention). The exact
likelihood is replaced by a Gaussian with the same conditional mean and
covariance. Only the two candidate coordinates are modelled because the three
destinations always add up to the district size.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import sample_conditional_next
from .inference import FitResult, ParamSpace, maximize

log = logging.getLogger(__name__)

N_DEST = 3
LOGIT_BOUND = 15.0


@dataclass
class DistrictData:
    district: str
    first_round: np.ndarray
    second_round: np.ndarray

    def __post_init__(self):
        self.first_round = np.asarray(self.first_round, dtype=np.int64)
        self.second_round = np.asarray(self.second_round, dtype=np.int64)
        if self.second_round.size != N_DEST:
            raise ValueError("second round needs two candidates and abstention")
        if np.any(self.first_round < 0) or np.any(self.second_round < 0):
            raise ValueError("negative vote count")
        if self.first_round.sum() != self.second_round.sum():
            raise ValueError(
                f"district {self.district}: rounds total {self.first_round.sum()} and {self.second_round.sum()}"
            )

    @property
    def N(self) -> int:
        return int(self.first_round.sum())


def _stack(districts):
    if not districts:
        raise ValueError("no districts")
    Q1 = np.array([d.first_round for d in districts], dtype=float)
    Q2 = np.array([d.second_round for d in districts], dtype=float)
    return Q1, Q2


def load_districts(path: str | Path) -> list[DistrictData]:
    """Read ``district,opt_1..opt_m1,res_1,res_2,res_3`` rows; ``#`` lines are comments."""
    path = Path(path)
    with open(path, newline="") as fh:
        lines = [(i + 1, line) for i, line in enumerate(fh) if line.strip() and not line.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: empty file")
    reader = csv.reader(line for _, line in lines)
    header = [h.strip() for h in next(reader)]
    opts = [h for h in header if h.startswith("opt_")]
    res = [h for h in header if h.startswith("res_")]
    if header[0] != "district" or len(res) != N_DEST or header != ["district", *opts, *res] or not opts:
        raise ValueError(f"{path}: header must be district,opt_1..opt_m,res_1,res_2,res_3")
    out, seen, errors = [], set(), []
    for (lineno, _), row in zip(lines[1:], reader):
        if len(row) != len(header):
            errors.append(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            continue
        try:
            vals = [int(v) for v in row[1:]]
            d = DistrictData(row[0].strip(), vals[: len(opts)], vals[len(opts) :])
        except ValueError as exc:
            errors.append(f"line {lineno}: {exc}")
            continue
        if d.district in seen:
            errors.append(f"line {lineno}: duplicate district {d.district!r}")
            continue
        seen.add(d.district)
        out.append(d)
    if errors:
        raise ValueError(f"{path}: " + "; ".join(errors))
    if not out:
        raise ValueError(f"{path}: no district rows")
    return out


def write_districts(path: str | Path, districts: list[DistrictData]) -> None:
    m1 = districts[0].first_round.size
    with open(path, "w", newline="") as fh:
        fh.write("# format_version=1\n")
        w = csv.writer(fh)
        w.writerow(["district", *[f"opt_{i + 1}" for i in range(m1)], *[f"res_{i + 1}" for i in range(N_DEST)]])
        for d in districts:
            w.writerow([d.district, *d.first_round.tolist(), *d.second_round.tolist()])


def check_transition(T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[1] != N_DEST or np.any(T < 0) or np.any(np.abs(T.sum(1) - 1) > 1e-12):
        raise ValueError("transition matrix must be row-stochastic with three columns")
    return T


def district_conditional_moments(d: DistrictData, T) -> tuple[np.ndarray, np.ndarray]:
    """Mean (3,) and covariance (3, 3) of second-round counts given the first round."""
    T = np.asarray(T, dtype=float)
    q = d.first_round.astype(float)
    if T.shape != (q.size, N_DEST):
        raise ValueError("transition matrix shape does not match the district")
    mean = q @ T
    cov = np.diag(mean) - (T * q[:, None]).T @ T
    return mean, 0.5 * (cov + cov.T)


_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


def _district_logpdfs(Q1: np.ndarray, Q2: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Per-district Gaussian log-density of the two candidate counts."""
    mu = Q1 @ T[:, :2]
    a = Q1 @ (T[:, 0] * (1 - T[:, 0]))
    c = Q1 @ (T[:, 1] * (1 - T[:, 1]))
    b = -(Q1 @ (T[:, 0] * T[:, 1]))
    r0 = Q2[:, 0] - mu[:, 0]
    r1 = Q2[:, 1] - mu[:, 1]
    out = np.full(Q1.shape[0], np.nan)
    scale = (a + c) / 2
    todo = np.ones(Q1.shape[0], bool)
    for jit in _JITTERS:
        aa = a + jit * scale
        cc = c + jit * scale
        det = aa * cc - b * b
        ok = todo & (det > 0) & (aa > 0)
        if ok.any():
            quad = (cc[ok] * r0[ok] ** 2 - 2 * b[ok] * r0[ok] * r1[ok] + aa[ok] * r1[ok] ** 2) / det[ok]
            out[ok] = -np.log(2 * np.pi) - 0.5 * np.log(det[ok]) - 0.5 * quad
            todo &= ~ok
        if not todo.any():
            break
    if todo.any():
        exact = todo & (np.abs(r0) < 0.5) & (np.abs(r1) < 0.5) & (scale == 0)
        out[exact] = 0.0
        skipped = todo & ~exact
        if skipped.any():
            log.warning("skipping %d districts with singular covariance", int(skipped.sum()))
            out[skipped] = 0.0
    return out


def transfer_loglik(districts, T) -> float:
    """Sum over districts of the Gaussian log-density of the candidate counts."""
    T = check_transition(T)
    Q1, Q2 = _stack(districts)
    if T.shape[0] != Q1.shape[1]:
        raise ValueError("transition matrix has the wrong number of rows")
    return float(np.sum(_district_logpdfs(Q1, Q2, T)))


def logits_to_matrix(eta: np.ndarray, m1: int) -> np.ndarray:
    """Rows ``softmax(eta_1, eta_2, 0)``; the last column is the reference."""
    eta = np.asarray(eta, dtype=float).reshape(m1, N_DEST - 1)
    z = np.concatenate([eta, np.zeros((m1, 1))], axis=1)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def matrix_to_logits(T: np.ndarray) -> np.ndarray:
    T = np.clip(np.asarray(T, dtype=float), 1e-300, None)
    return np.log(T[:, : N_DEST - 1] / T[:, N_DEST - 1 :]).ravel()


@dataclass
class TransferFit:
    T: np.ndarray
    fit: FitResult
    first_labels: list[str] = field(default_factory=list)
    second_labels: list[str] = field(default_factory=list)


def transfer_space(m1: int, starts: list[np.ndarray], bound: float = LOGIT_BOUND) -> ParamSpace:
    names = [f"eta[{l},{j}]" for l in range(m1) for j in range(N_DEST - 1)]
    p = len(names)
    return ParamSpace(
        names,
        ["identity"] * p,
        np.full(p, -bound),
        np.full(p, bound),
        [np.clip(s, -bound, bound) for s in starts],
    )


def fit_transfer(districts, starts: int = 3, rng: np.random.Generator | None = None, *, init=None) -> TransferFit:
    """Maximize the district-summed Gaussian pseudo-likelihood over logit-coded ``T``.

    The first start is the uniform matrix (or ``init`` when given); the others
    draw logits uniformly in ``[-2, 2]``.
    """
    if len(districts) < 2:
        raise ValueError("need at least two districts")
    Q1, Q2 = _stack(districts)
    m1 = Q1.shape[1]
    rng = rng if rng is not None else np.random.default_rng(0)
    first = np.zeros(m1 * (N_DEST - 1)) if init is None else matrix_to_logits(init)
    start_list = [first] + [rng.uniform(-2, 2, first.size) for _ in range(max(starts, 1) - 1)]
    space = transfer_space(m1, start_list)
    names = space.names

    def loglik(params: dict) -> float:
        T = logits_to_matrix(np.array([params[n] for n in names]), m1)
        return float(np.sum(_district_logpdfs(Q1, Q2, T)))

    res = maximize(loglik, space, label="mgle")
    T = logits_to_matrix(np.array(res.x), m1)
    T /= T.sum(axis=1, keepdims=True)
    return TransferFit(T, res)


def resample_second_round(districts, T, rng: np.random.Generator) -> list[DistrictData]:
    return [
        DistrictData(d.district, d.first_round, sample_conditional_next(d.first_round, T, rng)) for d in districts
    ]


@dataclass
class TransferBootstrap:
    samples: np.ndarray  # (replicates, m1, 3)
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    n_requested: int
    n_retained: int
    status: str = "ok"


def transfer_bootstrap(fit: TransferFit, districts, n: int, rng_factory, *, level: float = 0.95) -> TransferBootstrap:
    """Parametric bootstrap of ``T``: resample second rounds at the fit, refit from it.

    ``rng_factory(i)`` supplies the stream for replicate ``i``.
    """
    if fit.fit.erratic:
        raise ValueError("cannot bootstrap from an erratic fit")
    samples = []
    for i in range(int(n)):
        rng = rng_factory(i)
        data = resample_second_round(districts, fit.T, rng)
        r = fit_transfer(data, starts=1, init=fit.T)
        if not r.fit.erratic:
            samples.append(r.T)
    arr = np.asarray(samples, dtype=float).reshape(-1, *fit.T.shape)
    alpha = (1 - level) / 2
    if arr.shape[0]:
        lo = np.percentile(arr, 100 * alpha, axis=0, method="inverted_cdf")
        hi = np.percentile(arr, 100 * (1 - alpha), axis=0, method="inverted_cdf")
    else:
        lo = hi = np.full(fit.T.shape, np.nan)
    status = "ok" if arr.shape[0] >= n / 2 else "warning"
    if status != "ok":
        log.warning("bootstrap retained %d of %d requested replicates", arr.shape[0], n)
    return TransferBootstrap(arr, lo, hi, int(n), int(arr.shape[0]), status)


def format_percent(p: float) -> str:
    v = 100 * p
    if v < 0.005:
        return "≈ 0 %"
    if v > 99.995:
        return "≈ 100 %"
    return f"{v:.2f} %"


def markdown_table(T, first_labels, second_labels, lower=None, upper=None) -> str:
    """Transfer matrix as a Markdown table, rows are first-round options."""
    T = np.asarray(T)
    lines = [
        "| First round | " + " | ".join(second_labels) + " |",
        "|---|" + "---|" * len(second_labels),
    ]
    for l, name in enumerate(first_labels):
        cells = []
        for j in range(T.shape[1]):
            cell = format_percent(T[l, j])
            if lower is not None and upper is not None:
                cell += f" [{100 * lower[l, j]:.2f}, {100 * upper[l, j]:.2f}]"
            cells.append(cell)
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def synthetic_districts(
    T,
    n_districts: int,
    size_range: tuple[int, int],
    base_shares,
    concentration: float,
    rng: np.random.Generator,
) -> list[DistrictData]:
    """Districts with log-uniform sizes, Dirichlet first-round shares and second rounds drawn from ``T``."""
    T = check_transition(T)
    base = np.asarray(base_shares, dtype=float)
    base = base / base.sum()
    lo, hi = size_range
    sizes = np.exp(rng.uniform(math.log(lo), math.log(hi), n_districts)).round().astype(np.int64)
    out = []
    for j, n in enumerate(sizes):
        shares = rng.dirichlet(concentration * base)
        q1 = rng.multinomial(n, shares)
        q2 = sample_conditional_next(q1, T, rng)
        out.append(DistrictData(f"D{j + 1:03d}", q1, q2))
    return out
