import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecmdist.core import sample_conditional_next
from ecmdist.simulate import derive_rng
from ecmdist.votes import (
    DistrictData,
    check_transition,
    district_conditional_moments,
    fit_transfer,
    format_percent,
    load_districts,
    logits_to_matrix,
    markdown_table,
    matrix_to_logits,
    synthetic_districts,
    transfer_bootstrap,
    transfer_loglik,
    write_districts,
)

T_TRUE = np.array(
    [
        [0.70, 0.10, 0.20],
        [0.15, 0.60, 0.25],
        [0.30, 0.30, 0.40],
        [0.10, 0.15, 0.75],
    ]
)
SHARES = [0.3, 0.3, 0.1, 0.3]


def synth(n=300, size_range=(10**3, 10**5), seed=0, T=T_TRUE):
    return synthetic_districts(T, n, size_range, SHARES, 30.0, derive_rng(seed, "districts"))


# ------------------------------------------------------------ loading


def test_load_round_trip(tmp_path):
    ds = synth(5)
    path = tmp_path / "d.csv"
    write_districts(path, ds)
    back = load_districts(path)
    assert [d.district for d in back] == [d.district for d in ds]
    assert all(np.array_equal(a.second_round, b.second_round) for a, b in zip(back, ds))


def test_single_district_accepted(tmp_path):
    p = tmp_path / "one.csv"
    p.write_text("district,opt_1,opt_2,res_1,res_2,res_3\nA,5,5,3,3,4\n")
    (d,) = load_districts(p)
    assert d.N == 10


def test_closure_violation_reports_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("# comment\ndistrict,opt_1,opt_2,res_1,res_2,res_3\nA,5,5,3,3,4\nB,5,5,3,3,3\n")
    with pytest.raises(ValueError, match="line 4"):
        load_districts(p)


@pytest.mark.parametrize(
    "body,match",
    [
        ("", "empty"),
        ("district,opt_1,res_1,res_2\nA,1,1,0\n", "header"),
        ("district,opt_1,res_1,res_2,res_3\nA,2,1,1\n", "line 2"),
        ("district,opt_1,res_1,res_2,res_3\nA,2,1,1,x\n", "line 2"),
        ("district,opt_1,res_1,res_2,res_3\nA,2,1,1,0\nA,2,2,0,0\n", "duplicate"),
        ("district,opt_1,res_1,res_2,res_3\n", "no district"),
    ],
)
def test_malformed_files(tmp_path, body, match):
    p = tmp_path / "f.csv"
    p.write_text(body)
    with pytest.raises(ValueError, match=match):
        load_districts(p)


def test_district_validation():
    with pytest.raises(ValueError):
        DistrictData("x", [5, 5], [3, 3, 3])
    with pytest.raises(ValueError):
        DistrictData("x", [5, 5], [5, 5])


# ------------------------------------------------------------ moments


def test_moments_deterministic_transfer():
    d = DistrictData("a", [4, 6], [10, 0, 0])
    mean, cov = district_conditional_moments(d, [[1, 0, 0], [1, 0, 0]])
    assert np.array_equal(mean, [10, 0, 0]) and np.all(cov == 0)


def test_moments_single_source_multinomial():
    row = np.array([0.2, 0.5, 0.3])
    mean, cov = district_conditional_moments(DistrictData("a", [40], [8, 20, 12]), row[None])
    assert np.allclose(mean, 40 * row)
    assert np.allclose(cov, 40 * (np.diag(row) - np.outer(row, row)))


def test_moments_match_sampler():
    d = DistrictData("a", [30, 20], [20, 18, 12])
    T = np.array([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]])
    rng = np.random.default_rng(12)
    R = 10**6
    X = np.array([sample_conditional_next(d.first_round, T, rng) for _ in range(R)], float)
    mean, cov = district_conditional_moments(d, T)
    assert np.all(np.abs(X.mean(0) - mean) < 4 * np.sqrt(np.diag(cov) / R))
    D = X - X.mean(0)
    prods = D[:, :, None] * D[:, None, :]
    assert np.all(np.abs(prods.mean(0) - cov) < 4 * prods.std(0) / math.sqrt(R))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_moments_psd(seed):
    rng = np.random.default_rng(seed)
    m1 = int(rng.integers(1, 9))
    T = rng.dirichlet(np.full(3, 0.7), size=m1)
    q1 = rng.integers(0, 10**5, m1)
    _, cov = district_conditional_moments(DistrictData("a", q1, [q1.sum(), 0, 0]), T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-8 * max(np.trace(cov), 1e-300)


# ------------------------------------------------------------ objective


def test_truth_beats_perturbations():
    ds = synth(100, seed=1)
    best = transfer_loglik(ds, T_TRUE)
    rng = np.random.default_rng(3)
    for _ in range(100):
        eta = matrix_to_logits(T_TRUE) + rng.normal(0, 0.3, 8)
        assert transfer_loglik(ds, logits_to_matrix(eta, 4)) < best


def test_duplicates_double_and_order_invariance():
    ds = synth(20, seed=2)
    base = transfer_loglik(ds, T_TRUE)
    assert transfer_loglik(ds + ds, T_TRUE) == pytest.approx(2 * base, rel=1e-14)
    perm = [ds[i] for i in np.random.default_rng(0).permutation(len(ds))]
    assert transfer_loglik(perm, T_TRUE) == pytest.approx(base, rel=1e-13)


def test_exact_match_shortcut():
    T = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    ds = [DistrictData("a", [7, 3], [7, 0, 3]), DistrictData("b", [2, 9], [2, 0, 9])]
    assert transfer_loglik(ds, T) == 0.0


def test_check_transition():
    with pytest.raises(ValueError):
        check_transition([[0.5, 0.5, 0.1]])
    with pytest.raises(ValueError):
        transfer_loglik(synth(3), T_TRUE[:3])


def test_logit_round_trip():
    assert np.allclose(logits_to_matrix(matrix_to_logits(T_TRUE), 4), T_TRUE)
    assert np.allclose(logits_to_matrix(np.zeros(8), 4), 1 / 3)


# ------------------------------------------------------------ fitting


def test_recovery():
    ds = synth(300, seed=4)
    fit = fit_transfer(ds, starts=3, rng=derive_rng(4, "starts"))
    assert not fit.fit.erratic
    assert np.max(np.abs(fit.T - T_TRUE)) < 0.01
    assert np.all(fit.T.sum(1) == 1.0) or np.max(np.abs(fit.T.sum(1) - 1)) <= 2e-16


def test_doubling_counts_large_n():
    ds = synth(300, size_range=(10**5, 2 * 10**5), seed=5)
    base = fit_transfer(ds, starts=1).T
    doubled = [DistrictData(d.district, 2 * d.first_round, 2 * d.second_round) for d in ds]
    assert np.max(np.abs(fit_transfer(doubled, starts=1).T - base)) < 0.005


def test_consistency_sweep_small_vs_large_n():
    # same first-round compositions at two size scales, fresh second rounds
    small = synth(10**4, size_range=(10**3, 2 * 10**3), seed=5)
    rng = derive_rng(5, "large")
    large = []
    for d in small:
        q1 = 100 * d.first_round
        large.append(DistrictData(d.district, q1, sample_conditional_next(q1, T_TRUE, rng)))
    a, b = fit_transfer(small, starts=1).T, fit_transfer(large, starts=1).T
    assert np.max(np.abs(a - b)) < 0.005


def test_corner_entry_within_interval():
    T = np.array([[0.98, 0.0, 0.02], [0.05, 0.9, 0.05], [0.2, 0.2, 0.6]])
    ds = synthetic_districts(T, 200, (10**3, 10**5), [0.4, 0.4, 0.2], 30.0, derive_rng(1))
    fit = fit_transfer(ds, starts=2, rng=derive_rng(1, "starts"))
    boot = transfer_bootstrap(fit, ds, 40, lambda i: derive_rng(1, "boot", i))
    assert boot.n_retained >= 2
    # the zero sits on the edge of the logit box, so coverage is at display precision
    assert format_percent(boot.ci_lower[0, 1]) == "≈ 0 %"
    assert boot.ci_lower[0, 1] <= fit.T[0, 1] <= boot.ci_upper[0, 1]
    assert fit.T[0, 1] < 0.005


def test_needs_two_districts():
    with pytest.raises(ValueError):
        fit_transfer(synth(1))


def test_bootstrap_two_replicates():
    ds = synth(60, seed=7)
    fit = fit_transfer(ds, starts=1)
    boot = transfer_bootstrap(fit, ds, 2, lambda i: derive_rng(7, "boot", i))
    assert boot.n_retained == 2 and boot.samples.shape == (2, 4, 3)
    assert np.array_equal(boot.ci_lower, boot.samples.min(0))
    assert np.array_equal(boot.ci_upper, boot.samples.max(0))


def test_format_percent_and_table():
    assert format_percent(0.3104) == "31.04 %"
    assert format_percent(1e-9) == "≈ 0 %"
    assert format_percent(1 - 1e-9) == "≈ 100 %"
    md = markdown_table(np.array([[0.5, 0.25, 0.25]]), ["Parisi"], ["Kast", "Boric", "Abst"], np.full((1, 3), 0.2), np.full((1, 3), 0.6))
    lines = md.strip().splitlines()
    assert lines[0] == "| First round | Kast | Boric | Abst |"
    assert lines[2] == "| Parisi | 50.00 % [20.00, 60.00] | 25.00 % [20.00, 60.00] | 25.00 % [20.00, 60.00] |"
