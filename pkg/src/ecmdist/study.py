"""Movement-parameter estimation problems and replicate simulation studies."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import CountArrangement, Known, PoissonRate
from .inference import FitError, FitResult, ParamSpace, fit, parametric_bootstrap
from .movement import FAMILIES, SurveyDesign, build_model, build_path_table
from .simulate import SimulationScenario, derive_rng, simulate_scenario, sample_trajectories, count_arrangement


@dataclass
class MovementProblem:
    """A movement family observed through a survey design.

    ``fixed`` holds natural-scale values for family parameters that are not
    estimated. The size is ``Known(N)`` in ``"ecm"`` mode; in ``"poisson"``
    mode the rate is either the free parameter ``lam`` or ``fixed["lam"]``.
    """

    family: str
    design: SurveyDesign
    mode: str = "ecm"
    N: int | None = None
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown movement family {self.family!r}")
        if self.mode not in ("ecm", "poisson"):
            raise ValueError("mode must be 'ecm' or 'poisson'")
        if self.mode == "ecm" and self.N is None:
            raise ValueError("ecm mode needs a known population size N")

    def params(self, values: dict) -> dict:
        return {**self.fixed, **values}

    def size(self, params: dict):
        if self.mode == "ecm":
            return Known(self.N)
        return PoissonRate(params["lam"])

    def model(self, params: dict):
        return build_model(self.family, self.params(params), self.design.times)

    def model_fn(self, values: dict):
        params = self.params(values)
        table = build_path_table(build_model(self.family, params, self.design.times), self.design)
        return table, self.size(params)

    def simulate(self, values: dict, rng: np.random.Generator) -> CountArrangement:
        params = self.params(values)
        n = self.N if self.mode == "ecm" else int(rng.poisson(params["lam"]))
        pos, _ = sample_trajectories(self.model(params), self.design.times, n, rng)
        return count_arrangement(pos, self.design)

    def fit(self, estimator: str, counts: CountArrangement, space: ParamSpace, **kw) -> FitResult:
        return fit(estimator, counts, self.model_fn, space, **kw)

    def bootstrap(self, estimator: str, result: FitResult, space: ParamSpace, n: int, seed: int, **kw):
        return parametric_bootstrap(
            result,
            self.simulate,
            lambda c: self.fit(estimator, c, space),
            n,
            lambda i: derive_rng(seed, "boot", i),
            **kw,
        )


# ------------------------------------------------------------ replicate studies

STUDY_FIELDS = ["estimator", "size", "replicate", "erratic", "min_eig", "start_index", "objective"]


def _row_key(row: dict) -> tuple:
    return (row["estimator"], str(row["size"]), int(row["replicate"]))


def load_rows(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]


def run_study(
    problem_for_size,
    space_for_size,
    sizes: Iterable,
    estimators: Iterable[str],
    replicates: int,
    seed: int,
    truth: dict,
    out_path: str | os.PathLike | None = None,
    jobs: int = 1,
) -> list[dict]:
    """Fit every (size, replicate) dataset with every estimator.

    Datasets come from ``derive_rng(seed, "data", size, replicate)`` so all
    estimators see the same counts. With ``out_path`` rows are appended to a
    long CSV as they finish and rows already present are skipped on rerun.
    """
    sizes = list(sizes)
    estimators = list(estimators)
    names = list(space_for_size(sizes[0]).names)
    fields = STUDY_FIELDS + names
    path = Path(out_path) if out_path else None
    done = {}
    if path is not None:
        for r in load_rows(path):
            done[_row_key(r)] = r
        if not path.exists():
            with open(path, "w", newline="") as fh:
                fh.write("# format_version=1\n")
                csv.DictWriter(fh, fieldnames=fields).writeheader()
    tasks = [
        (size, rep, est)
        for size in sizes
        for rep in range(replicates)
        for est in estimators
        if (est, str(size), rep) not in done
    ]

    def one(size, rep, est):
        problem = problem_for_size(size)
        space = space_for_size(size)
        counts = problem.simulate(truth, derive_rng(seed, "data", _size_key(size), rep))
        row = {"estimator": est, "size": size, "replicate": rep}
        try:
            res = problem.fit(est, counts, space)
        except FitError:
            row.update(erratic=True, min_eig=math.nan, start_index=-1, objective=math.inf)
            row.update({n: math.nan for n in names})
            return row
        row.update(
            erratic=res.erratic,
            min_eig=res.min_hessian_eigenvalue,
            start_index=res.start_index,
            objective=res.objective,
        )
        row.update(dict(zip(names, res.x)))
        return row

    def emit(row):
        if path is not None:
            with open(path, "a", newline="") as fh:
                csv.DictWriter(fh, fieldnames=fields).writerow(row)
        done[_row_key(row)] = row

    if jobs > 1 and tasks:
        from joblib import Parallel, delayed

        for row in Parallel(n_jobs=jobs, return_as="generator")(delayed(one)(*t) for t in tasks):
            emit(row)
    else:
        for t in tasks:
            emit(one(*t))
    rows = [done[k] for k in sorted(done, key=lambda k: (k[0], k[1], k[2]))]
    return rows


def _size_key(size) -> int:
    return int(round(float(size)))


def _truthy(v) -> bool:
    return str(v).lower() in ("true", "1")


def summarize(rows: list[dict], truth_transformed: dict) -> list[dict]:
    """Mean, bias, RMSE and erratic fraction per (estimator, size, parameter).

    Erratic fits are excluded from the moments.
    """
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["estimator"], str(r["size"])), []).append(r)
    out = []
    for (est, size), rs in sorted(groups.items()):
        ok = [r for r in rs if not _truthy(r["erratic"])]
        for name, true in truth_transformed.items():
            vals = np.array([float(r[name]) for r in ok], dtype=float)
            mean = float(vals.mean()) if vals.size else math.nan
            out.append(
                {
                    "estimator": est,
                    "size": size,
                    "parameter": name,
                    "n_fits": len(rs),
                    "n_retained": int(vals.size),
                    "erratic_fraction": 1 - vals.size / len(rs),
                    "mean": mean,
                    "bias": mean - true,
                    "rmse": float(np.sqrt(np.mean((vals - true) ** 2))) if vals.size else math.nan,
                }
            )
    return out
