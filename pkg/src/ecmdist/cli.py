"""Command-line entry point.

Exit codes: 0 success, 1 configuration or I/O error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import io
from .core import Known, PoissonRate
from .gaussprob import Interval, Rect2D
from .inference import FitError, FitResult, ParamSpace, movement_study_space
from .movement import FAMILIES
from .simulate import DesignSpec, SimulationScenario, derive_rng, generate_design, simulate_scenario
from .study import MovementProblem, run_study, summarize
from .votes import fit_transfer, load_districts, markdown_table, transfer_bootstrap

log = logging.getLogger("ecmdist")

MGLE_MIN_TOTAL = 1000


class NumericalError(RuntimeError):
    pass


# ------------------------------------------------------------ config helpers


def _size(cfg: dict):
    s = cfg.get("size")
    if not s:
        raise io.ConfigError("config needs a size section")
    if s["mode"] == "ecm":
        if "N" not in s:
            raise io.ConfigError("size.N is required in ecm mode")
        return Known(s["N"])
    if "rate" not in s:
        raise io.ConfigError("size.rate is required in poisson mode")
    return PoissonRate(s["rate"])


def _model_section(cfg: dict) -> tuple[str, dict]:
    m = cfg.get("model")
    if not m:
        raise io.ConfigError("config needs a model section")
    missing = [n for n in FAMILIES[m["family"]] if n not in m["params"]]
    if missing:
        raise io.ConfigError(f"model.params missing {missing}")
    return m["family"], dict(m["params"])


def _design_spec(cfg: dict) -> DesignSpec:
    d = cfg["design"]
    x0, x1, y0, y1 = d["domain"]
    try:
        return DesignSpec(
            n_times=d["n_times"],
            time_window=Interval(*d["time_window"]),
            cells_per_time=tuple(d["cells_per_time"]),
            cell_side=d["cell_side"],
            placement_domain=Rect2D(Interval(x0, x1), Interval(y0, y1)),
        )
    except ValueError as exc:
        raise io.ConfigError(f"design: {exc}") from exc


def _space(cfg: dict, family: str, params: dict, size) -> ParamSpace:
    est = cfg["estimation"]
    if est.get("space", "default") == "default":
        if family != "steady_ou":
            raise io.ConfigError("the default parameter space exists only for steady_ou; use space: explicit")
        rate = size.rate if isinstance(size, PoissonRate) else None
        return movement_study_space(params["tau"], params["sigma"], rate=rate, rate_bounds=tuple(est["rate_bounds"]))
    entries = est.get("parameters") or []
    if not entries:
        raise io.ConfigError("estimation.parameters must list the free parameters")
    n_starts = {len(e["starts"]) for e in entries}
    if len(n_starts) != 1:
        raise io.ConfigError("all parameters need the same number of starts")
    names = [e["name"] for e in entries]
    allowed = set(FAMILIES[family]) | ({"lam"} if isinstance(size, PoissonRate) else set())
    if not set(names) <= allowed:
        raise io.ConfigError(f"unknown free parameters {sorted(set(names) - allowed)}")
    probe = ParamSpace(names, [e["transform"] for e in entries], [0.0] * len(names), [0.0] * len(names), [[0.0] * len(names)])
    try:
        lower = probe.from_natural({e["name"]: e["lower"] for e in entries})
        upper = probe.from_natural({e["name"]: e["upper"] for e in entries})
        starts = [probe.from_natural({e["name"]: e["starts"][i] for e in entries}) for i in range(n_starts.pop())]
        return ParamSpace(names, probe.transforms, lower, upper, starts)
    except ValueError as exc:
        raise io.ConfigError(f"estimation.parameters: {exc}") from exc


def _problem(cfg: dict, design, size=None) -> tuple[MovementProblem, dict]:
    family, params = _model_section(cfg)
    size = size or _size(cfg)
    if isinstance(size, Known):
        problem = MovementProblem(family, design, "ecm", size.N, fixed=params)
    else:
        problem = MovementProblem(family, design, "poisson", None, fixed={**params, "lam": size.rate})
    return problem, params


def _warn_mgle(estimator: str, size) -> None:
    total = size.N if isinstance(size, Known) else size.rate
    if estimator == "mgle" and total < MGLE_MIN_TOTAL:
        msg = (
            f"MGLE with a mean population of {total:g} (< {MGLE_MIN_TOTAL}) is unreliable; "
            "prefer MCLE for small populations"
        )
        log.warning(msg)


def _fit_from_json(d: dict) -> FitResult:
    def num(v):
        if v is None:
            return math.nan
        if isinstance(v, str):
            return float(v)
        return v

    d = dict(d)
    for k in ("objective", "min_hessian_eigenvalue"):
        d[k] = num(d[k])
    d["hessian"] = [[num(v) for v in row] for row in d["hessian"]]
    d["local_optima"] = [{**o, "objective": num(o["objective"])} for o in d.get("local_optima", [])]
    return FitResult.from_dict(d)


# ------------------------------------------------------------ commands


def cmd_simulate(args) -> int:
    cfg = io.load_config(args.config, args.set)
    family, params = _model_section(cfg)
    size = _size(cfg)
    out = Path(args.out)
    seed = cfg["seed"]
    design = generate_design(_design_spec(cfg), derive_rng(seed, "design"))
    problem, _ = _problem(cfg, design, size)
    scenario = SimulationScenario(problem.model(params), design, size, seed)
    io.write_times(out / "times.csv", design.times)
    realized = []
    for r in range(args.replicates):
        sim = simulate_scenario(scenario, r)
        io.write_counts(out / f"counts_{r:04d}.csv", sim.counts, design)
        realized.append(sim.realized_n)
    meta = {
        "format_version": io.FORMAT_VERSION,
        "seed": seed,
        "replicates": args.replicates,
        "realized_n": realized,
        "design_cells": list(design.m),
        "config": cfg,
    }
    io.atomic_write(out / "metadata.json", io.to_json(meta))
    print(f"wrote {args.replicates} arrangement(s) to {out}")
    return 0


def cmd_fit(args) -> int:
    cfg = io.load_config(args.config, args.set)
    counts, design = io.read_counts(args.counts, args.times)
    size = _size(cfg)
    problem, params = _problem(cfg, design, size)
    space = _space(cfg, problem.family, params, size)
    estimator = args.estimator or cfg["estimation"]["estimator"]
    _warn_mgle(estimator, size)
    try:
        res = problem.fit(estimator, counts, space)
    except FitError as exc:
        raise NumericalError(str(exc)) from exc
    doc = {
        "format_version": io.FORMAT_VERSION,
        "counts": str(args.counts),
        "transformed": dict(zip(res.names, res.x)),
        "natural": res.natural,
        "fit": res.to_dict(),
    }
    io.atomic_write(args.out, io.to_json(doc))
    flag = "ERRATIC" if res.erratic else "ok"
    print(f"{estimator} fit {flag}: " + ", ".join(f"{k}={v:.6g}" for k, v in res.natural.items()))
    return 0


def cmd_bootstrap(args) -> int:
    cfg = io.load_config(args.config, args.set)
    doc = io.read_json(args.fit)
    res = _fit_from_json(doc["fit"])
    if res.erratic:
        print("error: the input fit is erratic; bootstrap refused", file=sys.stderr)
        return 2
    counts_path = args.counts or doc.get("counts")
    _, design = io.read_counts(counts_path, args.times)
    size = _size(cfg)
    problem, params = _problem(cfg, design, size)
    space = _space(cfg, problem.family, params, size).with_starts([res.x])
    n = cfg["bootstrap"]["n"] if args.n is None else args.n
    boot = problem.bootstrap(
        res.estimator, res, space, n, cfg["seed"], overdraw=cfg["bootstrap"]["overdraw"]
    )
    out = Path(args.out)
    io.atomic_write(out / "bootstrap.json", io.to_json({"format_version": io.FORMAT_VERSION, **boot.to_dict()}))
    rows = [(k, res.natural[k], boot.ci_lower[k], boot.ci_upper[k]) for k in boot.names]
    buf = _io.StringIO()
    buf.write("# format_version=1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "estimate", "ci_lower", "ci_upper"])
    w.writerows(rows)
    io.atomic_write(out / "ci.csv", buf.getvalue())
    md = ["| Parameter | Estimate | 95 % bootstrap CI |", "|---|---|---|"]
    md += [f"| {k} | {e:.4g} | [{lo:.4g}, {hi:.4g}] |" for k, e, lo, hi in rows]
    md.append(f"\n{boot.n_retained} of {boot.n_requested} requested replicates retained ({boot.status}).")
    io.atomic_write(out / "ci.md", "\n".join(md) + "\n")
    print("\n".join(md))
    return 0 if boot.status == "ok" else 2


def cmd_vote_transfer(args) -> int:
    cfg = io.load_config(args.config, args.set)
    districts = load_districts(args.data)
    m1 = districts[0].first_round.size
    if any(d.first_round.size != m1 for d in districts):
        raise io.ConfigError("districts disagree on the number of first-round options")
    first = [f"opt_{i + 1}" for i in range(m1)]
    second = ["res_1", "res_2", "res_3"]
    if args.labels:
        try:
            lab = yaml.safe_load(Path(args.labels).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise io.ConfigError(f"cannot read labels {args.labels}: {exc}") from exc
        first = [str(v) for v in lab.get("first_round", first)]
        second = [str(v) for v in lab.get("second_round", second)]
        if len(first) != m1 or len(second) != 3:
            raise io.ConfigError("labels must name every first-round option and the three second-round options")
    seed = cfg["seed"]
    vcfg = cfg["votes"]
    try:
        fitted = fit_transfer(districts, vcfg["starts"], derive_rng(seed, "starts"))
    except FitError as exc:
        raise NumericalError(str(exc)) from exc
    n_boot = vcfg["bootstrap"] if args.bootstrap is None else args.bootstrap
    lower = upper = None
    result = {
        "format_version": io.FORMAT_VERSION,
        "first_round": first,
        "second_round": second,
        "transfer": fitted.T,
        "erratic": fitted.fit.erratic,
        "min_hessian_eigenvalue": fitted.fit.min_hessian_eigenvalue,
        "objective": fitted.fit.objective,
        "n_districts": len(districts),
        "n_voters": int(sum(d.N for d in districts)),
    }
    if n_boot:
        if fitted.fit.erratic:
            print("error: erratic fit; bootstrap refused", file=sys.stderr)
            return 2
        boot = transfer_bootstrap(fitted, districts, n_boot, lambda i: derive_rng(seed, "boot", i))
        lower, upper = boot.ci_lower, boot.ci_upper
        result.update(
            ci_lower=lower,
            ci_upper=upper,
            bootstrap_retained=boot.n_retained,
            bootstrap_requested=n_boot,
            bootstrap_status=boot.status,
        )
    out = Path(args.out)
    io.atomic_write(out / "transfer.json", io.to_json(result))
    md = markdown_table(fitted.T, first, second, lower, upper)
    io.atomic_write(out / "transfer.md", md)
    print(md)
    return 0 if result.get("bootstrap_status", "ok") == "ok" else 2


def _long_rows(rows: list[dict], names: list[str]) -> list[dict]:
    out = []
    for r in rows:
        for n in names:
            out.append(
                {
                    "estimator": r["estimator"],
                    "size": r["size"],
                    "replicate": r["replicate"],
                    "parameter": n,
                    "value": r[n],
                    "erratic": r["erratic"],
                }
            )
    return out


def _csv_text(fields: list[str], rows: list[dict]) -> str:
    buf = _io.StringIO()
    buf.write("# format_version=1\n")
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_study(args) -> int:
    cfg = io.load_config(args.config, args.set)
    family, params = _model_section(cfg)
    base_size = _size(cfg)
    st = cfg["study"]
    seed = cfg["seed"]
    design = generate_design(_design_spec(cfg), derive_rng(seed, "design"))
    poisson = isinstance(base_size, PoissonRate)

    def size_of(v):
        return PoissonRate(v) if poisson else Known(int(v))

    def problem_for(v):
        return _problem(cfg, design, size_of(v))[0]

    def space_for(v):
        return _space(cfg, family, params, size_of(v))

    for est in st["estimators"]:
        for v in st["sizes"]:
            _warn_mgle(est, size_of(v))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    progress = out / "study_fits.csv"
    if progress.exists() and not args.resume:
        progress.unlink()
    truth = {**params, **({"lam": base_size.rate} if poisson else {})}
    rows = []
    names: list[str] = []
    if st["sizes"] and st["estimators"]:
        names = space_for(st["sizes"][0]).names
        rows = run_study(
            problem_for, space_for, st["sizes"], st["estimators"], st["replicates"], seed, truth, progress, args.jobs
        )
    long_fields = ["estimator", "size", "replicate", "parameter", "value", "erratic"]
    io.atomic_write(out / "study_long.csv", _csv_text(long_fields, _long_rows(rows, names)))
    summary = []
    if rows:
        sp = space_for(st["sizes"][0])
        truth_t = dict(zip(sp.names, sp.from_natural({n: truth[n] for n in sp.names})))
        summary = summarize(rows, truth_t)
    sum_fields = ["estimator", "size", "parameter", "n_fits", "n_retained", "erratic_fraction", "mean", "bias", "rmse"]
    io.atomic_write(out / "study_summary.csv", _csv_text(sum_fields, summary))
    md = ["| Estimator | Size | Parameter | Mean (bias) | RMSE | Erratic |", "|---|---|---|---|---|---|"]
    md += [
        f"| {s['estimator']} | {s['size']} | {s['parameter']} | {s['mean']:.3f} ({s['bias']:+.3f}) | "
        f"{s['rmse']:.3f} | {100 * s['erratic_fraction']:.0f} % |"
        for s in summary
    ]
    io.atomic_write(out / "study_summary.md", "\n".join(md) + "\n")
    print("\n".join(md))
    return 0


# ------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecmdist", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")

    s = sub.add_parser("simulate", help="simulate count arrangements")
    common(s)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--replicates", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a movement model to counts")
    common(f)
    f.add_argument("--counts", required=True)
    f.add_argument("--times", help="times.csv (default: next to the counts file)")
    f.add_argument("--estimator", choices=["mgle", "mcle"])
    f.add_argument("--out", required=True, help="result JSON path")
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("bootstrap", help="parametric bootstrap of a fit")
    common(b)
    b.add_argument("--fit", required=True, help="fit result JSON")
    b.add_argument("--counts", help="counts file (default: the one recorded in the fit)")
    b.add_argument("--times")
    b.add_argument("--n", type=int)
    b.add_argument("--out", required=True, help="output directory")
    b.set_defaults(func=cmd_bootstrap)

    v = sub.add_parser("vote-transfer", help="estimate a two-round vote transfer matrix")
    common(v, config_required=False)
    v.add_argument("--data", required=True, help="district CSV")
    v.add_argument("--labels", help="YAML with first_round and second_round label lists")
    v.add_argument("--bootstrap", type=int)
    v.add_argument("--out", required=True, help="output directory")
    v.set_defaults(func=cmd_vote_transfer)

    st = sub.add_parser("study", help="replicated simulate-and-fit study")
    common(st)
    st.add_argument("--out", required=True, help="output directory")
    st.add_argument("--jobs", type=int, default=1)
    st.add_argument("--resume", action="store_true", help="reuse completed replicates")
    st.set_defaults(func=cmd_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "replicates", 0) is not None and getattr(args, "replicates", 0) < 0:
        print("error: --replicates must be non-negative", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (io.ConfigError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, FitError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
