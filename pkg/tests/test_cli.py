import json
import logging

import numpy as np
import pytest
import yaml

from ecmdist import cli
from ecmdist.inference import FitError
from ecmdist.simulate import derive_rng
from ecmdist.study import MovementProblem
from ecmdist.votes import synthetic_districts, write_districts

CONFIG = {
    "seed": 7,
    "model": {"family": "steady_ou", "params": {"tau": 0.4, "sigma": 0.0178885, "z1": -0.2, "z2": 0.1}},
    "design": {
        "n_times": 5,
        "time_window": [0, 10],
        "cells_per_time": [5, 8],
        "cell_side": 0.2,
        "domain": [-0.8, 0.4, -0.5, 0.7],
    },
    "size": {"mode": "ecm", "N": 1000},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(CONFIG))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_simulate_then_fit(tmp_path, config):
    assert run("simulate", "--config", config, "--out", tmp_path / "sim", "--replicates", 2) == 0
    files = sorted(p.name for p in (tmp_path / "sim").iterdir())
    assert files == ["counts_0000.csv", "counts_0001.csv", "metadata.json", "times.csv"]
    meta = json.loads((tmp_path / "sim" / "metadata.json").read_text())
    assert meta["format_version"] == 1 and meta["realized_n"] == [1000, 1000]
    assert all(5 <= m <= 8 for m in meta["design_cells"]) and len(meta["design_cells"]) == 5
    out = tmp_path / "fit.json"
    assert run("fit", "--config", config, "--counts", tmp_path / "sim" / "counts_0000.csv", "--out", out) == 0
    doc = json.loads(out.read_text())
    assert set(doc["natural"]) == {"tau", "sigma", "z1", "z2"}
    assert doc["fit"]["erratic"] is False and doc["fit"]["estimator"] == "mcle"
    assert abs(np.log(doc["natural"]["tau"]) - np.log(0.4)) < 0.2
    assert np.isfinite(doc["fit"]["min_hessian_eigenvalue"])


def test_byte_identical_reruns(tmp_path, config):
    for d in ("a", "b"):
        assert run("simulate", "--config", config, "--out", tmp_path / d, "--replicates", 1) == 0
    for name in ("counts_0000.csv", "times.csv", "metadata.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    fits = []
    for d in ("a", "b"):
        out = tmp_path / f"{d}.json"
        run("fit", "--config", config, "--counts", tmp_path / d / "counts_0000.csv", "--out", out)
        fits.append(json.loads(out.read_text()))
    fits[1]["counts"] = fits[0]["counts"]
    assert fits[0] == fits[1]


def test_zero_replicates_metadata_only(tmp_path, config):
    assert run("simulate", "--config", config, "--out", tmp_path / "s", "--replicates", 0) == 0
    assert sorted(p.name for p in (tmp_path / "s").iterdir()) == ["metadata.json", "times.csv"]
    assert run("simulate", "--config", config, "--out", tmp_path / "s", "--replicates", -1) == 1


def test_io_errors_exit_one(tmp_path, config, capsys):
    assert run("fit", "--config", config, "--counts", tmp_path / "nope.csv", "--out", tmp_path / "f.json") == 1
    run("simulate", "--config", config, "--out", tmp_path / "s")
    (tmp_path / "s" / "times.csv").unlink()
    assert run("fit", "--config", config, "--counts", tmp_path / "s" / "counts_0000.csv", "--out", tmp_path / "f.json") == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**CONFIG, "size": {"mode": "ecm", "N": -3}}))
    assert run("simulate", "--config", bad, "--out", tmp_path / "x") == 1
    assert "size.N" in capsys.readouterr().err
    assert run("simulate", "--config", config, "--set", "design.cell_side=0", "--out", tmp_path / "x") == 1


def test_fit_failure_exit_two(tmp_path, config, monkeypatch):
    run("simulate", "--config", config, "--out", tmp_path / "s")

    def boom(self, *a, **k):
        raise FitError("no start point produced a finite objective")

    monkeypatch.setattr(MovementProblem, "fit", boom)
    assert run("fit", "--config", config, "--counts", tmp_path / "s" / "counts_0000.csv", "--out", tmp_path / "f.json") == 2


def test_bootstrap_erratic_refused(tmp_path, config):
    # three widely spaced times leave the speed parameter unidentified
    args = ["--config", config, "--set", "design.n_times=3", "--set", "design.cells_per_time=[3,4]"]
    run("simulate", *args, "--out", tmp_path / "s")
    run("fit", *args, "--counts", tmp_path / "s" / "counts_0000.csv", "--out", tmp_path / "f.json")
    assert json.loads((tmp_path / "f.json").read_text())["fit"]["erratic"] is True
    assert run("bootstrap", *args, "--fit", tmp_path / "f.json", "--n", 2, "--out", tmp_path / "b") == 2


def test_bootstrap_tables_and_determinism(tmp_path, config):
    run("simulate", "--config", config, "--out", tmp_path / "s")
    run("fit", "--config", config, "--counts", tmp_path / "s" / "counts_0000.csv", "--out", tmp_path / "f.json")
    for d in ("b1", "b2"):
        assert run("bootstrap", "--config", config, "--fit", tmp_path / "f.json", "--n", 2, "--out", tmp_path / d) == 0
    for name in ("bootstrap.json", "ci.csv", "ci.md"):
        assert (tmp_path / "b1" / name).read_bytes() == (tmp_path / "b2" / name).read_bytes()
    lines = (tmp_path / "b1" / "ci.csv").read_text().splitlines()
    assert lines[1] == "parameter,estimate,ci_lower,ci_upper" and len(lines) == 6
    assert run("bootstrap", "--config", config, "--fit", tmp_path / "f.json", "--n", 0, "--out", tmp_path / "b0") == 0
    assert json.loads((tmp_path / "b0" / "bootstrap.json").read_text())["n_retained"] == 0


def test_mgle_warning_small_poisson(tmp_path, config, caplog):
    args = ["--config", config, "--set", "size={mode: poisson, rate: 100}"]
    run("simulate", *args, "--out", tmp_path / "s")
    with caplog.at_level(logging.WARNING, logger="ecmdist"):
        run("fit", *args, "--estimator", "mgle", "--counts", tmp_path / "s" / "counts_0000.csv", "--out", tmp_path / "f.json")
    assert any("MGLE" in r.message and "unreliable" in r.message for r in caplog.records)
    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="ecmdist"):
        run("fit", "--config", config, "--estimator", "mgle", "--counts", tmp_path / "s" / "counts_0000.csv", "--out", tmp_path / "g.json")
    assert not any("unreliable" in r.message for r in caplog.records)


def test_study_empty_grid(tmp_path, config):
    assert run("study", "--config", config, "--out", tmp_path / "st") == 0
    text = (tmp_path / "st" / "study_long.csv").read_text().splitlines()
    assert text == ["# format_version=1", "estimator,size,replicate,parameter,value,erratic"]
    assert len((tmp_path / "st" / "study_summary.csv").read_text().splitlines()) == 2


def test_study_rows_and_resume(tmp_path, config):
    args = ["study", "--config", config, "--set", "study.sizes=[1000]", "--set", "study.replicates=2", "--out", tmp_path / "st"]
    assert run(*args) == 0
    long1 = (tmp_path / "st" / "study_long.csv").read_text()
    assert len(long1.splitlines()) == 2 + 2 * 4
    assert run(*args, "--resume") == 0
    assert (tmp_path / "st" / "study_long.csv").read_text() == long1
    summary = (tmp_path / "st" / "study_summary.csv").read_text().splitlines()
    assert summary[1].startswith("estimator,size,parameter,n_fits") and len(summary) == 6


def test_vote_transfer(tmp_path):
    T = np.array([[0.8, 0.1, 0.1], [0.1, 0.7, 0.2], [0.2, 0.2, 0.6]])
    ds = synthetic_districts(T, 40, (10**3, 10**4), [0.4, 0.4, 0.2], 30.0, derive_rng(1))
    data = tmp_path / "d.csv"
    write_districts(data, ds)
    labels = tmp_path / "labels.yaml"
    labels.write_text(yaml.safe_dump({"first_round": ["A", "B", "C"], "second_round": ["X", "Y", "Abst"]}))
    assert run("vote-transfer", "--data", data, "--labels", labels, "--bootstrap", 3, "--out", tmp_path / "v") == 0
    res = json.loads((tmp_path / "v" / "transfer.json").read_text())
    assert np.allclose(np.sum(res["transfer"], axis=1), 1.0)
    assert res["n_districts"] == 40 and res["bootstrap_status"] == "ok"
    md = (tmp_path / "v" / "transfer.md").read_text()
    assert md.startswith("| First round | X | Y | Abst |")
    labels.write_text(yaml.safe_dump({"first_round": ["A", "B"]}))
    assert run("vote-transfer", "--data", data, "--labels", labels, "--out", tmp_path / "w") == 1
    assert run("vote-transfer", "--data", tmp_path / "missing.csv", "--out", tmp_path / "w") == 1
