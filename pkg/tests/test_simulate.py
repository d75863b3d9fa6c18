import math

import numpy as np
import pytest

from ecmdist.core import Known, PoissonRate, ecm_mean_cov
from ecmdist.gaussprob import Interval, Rect2D
from ecmdist.movement import BrownianParams, MixtureParams, OUParams, SurveyDesign, build_path_table
from ecmdist.simulate import (
    DesignSpec,
    SimulationScenario,
    count_arrangement,
    derive_rng,
    generate_design,
    sample_trajectories,
    simulate_scenario,
)

TAU, SIGMA, Z = 0.4, 0.4 * math.sqrt(0.002), (-0.2, 0.1)


def test_generate_design_matches_setting():
    d = generate_design(DesignSpec(), derive_rng(5, "design"))
    assert d.times.size == 10
    assert np.all((d.times >= 0) & (d.times <= 10)) and np.all(np.diff(d.times) > 0)
    for b in d.bounds:
        assert 10 <= b.shape[0] <= 50
        assert np.allclose(b[:, 1] - b[:, 0], 0.1) and np.allclose(b[:, 3] - b[:, 2], 0.1)
        assert b.min() >= -1 and b.max() <= 1


def test_generate_design_deterministic_and_single_cell():
    spec = DesignSpec()
    a = generate_design(spec, derive_rng(9))
    b = generate_design(spec, derive_rng(9))
    assert np.array_equal(a.times, b.times)
    assert all(np.array_equal(x, y) for x, y in zip(a.bounds, b.bounds))
    one = generate_design(DesignSpec(cells_per_time=(1, 1)), derive_rng(1))
    assert one.m == (1,) * 10


def test_generate_design_crowded():
    spec = DesignSpec(
        cells_per_time=(5, 5),
        cell_side=0.6,
        placement_domain=Rect2D(Interval(0, 1), Interval(0, 1)),
        max_rejections=200,
    )
    with pytest.raises(RuntimeError):
        generate_design(spec, derive_rng(0))


def test_derive_rng_streams():
    a = derive_rng(3, "data", 10, 2).random(4)
    assert np.array_equal(a, derive_rng(3, "data", 10, 2).random(4))
    assert not np.array_equal(a, derive_rng(3, "data", 10, 3).random(4))
    assert not np.array_equal(a, derive_rng(3, "boot", 10, 2).random(4))


def test_steady_single_time_clt():
    pos, flags = sample_trajectories(OUParams(TAU, SIGMA, Z), [2.0], 10**5, derive_rng(1))
    assert flags is None and pos.shape == (10**5, 1, 2)
    assert np.all(np.abs(pos[:, 0].mean(0) - Z) < 3 * TAU / math.sqrt(10**5))


def test_steady_transition_autocorrelation():
    model = OUParams(0.5, 0.5, (0.0, 0.0))
    pos, _ = sample_trajectories(model, [0.0, 1.0], 10**5, derive_rng(2))
    r = np.corrcoef(pos[:, 0, 0], pos[:, 1, 0])[0, 1]
    assert abs(r - math.exp(-model.theta)) < 4 / math.sqrt(10**5)


def test_brownian_variance():
    sigma, t0 = 0.3, 1.0
    n = 10**5
    pos, _ = sample_trajectories(BrownianParams(sigma, t0, (0.5, -0.5)), [1.0, 3.0], n, derive_rng(3))
    assert np.array_equal(pos[:, 0], np.tile([0.5, -0.5], (n, 1)))
    v = ((pos[:, 1] - [0.5, -0.5]) ** 2).mean(0)
    want = sigma**2 * 2.0
    assert np.all(np.abs(v - want) < 3 * want * math.sqrt(2 / n))


def test_mixture_flags():
    _, flags = sample_trajectories(MixtureParams.build(0.0, 0.3, 0.1, (0, 0), 0.0, (0, 0)), [1.0, 2.0], 500, derive_rng(4))
    assert flags.dtype == bool and not flags.any()
    _, flags = sample_trajectories(MixtureParams.build(1.0, 0.3, 0.1, (0, 0), 0.0, (0, 0)), [1.0, 2.0], 500, derive_rng(4))
    assert flags.all()


def test_count_arrangement_basics():
    design = SurveyDesign([0.0, 1.0], [[(0, 1, 0, 1)], [(0, 1, 0, 1), (1, 2, 0, 1), (-1, 0, 0, 1), (2, 3, 0, 1)]])
    assert count_arrangement(np.zeros((0, 2, 2)), design).flat().sum() == 0
    pos = np.array([[[5.0, 5.0], [2.5, 0.5]]])
    c = count_arrangement(pos, design)
    assert c.counts[1].tolist() == [0, 0, 0, 1] and c.counts[0].tolist() == [0]
    # a shared edge belongs to the cell that starts there
    c = count_arrangement(np.array([[[0.0, 0.0], [1.0, 0.5]]]), design)
    assert c.counts[0].tolist() == [1] and c.counts[1].tolist() == [0, 1, 0, 0]


def small_design():
    cells = [
        [(-0.3, -0.1, 0.0, 0.2), (-0.1, 0.1, 0.0, 0.2)],
        [(-0.35, -0.15, 0.0, 0.2), (0.0, 0.3, -0.2, 0.1), (-0.2, 0.0, 0.2, 0.4)],
        [(-0.3, -0.1, 0.05, 0.25), (0.1, 0.4, 0.1, 0.4)],
    ]
    return SurveyDesign([0.0, 1.5, 4.0], cells)


def test_determinism_and_totals():
    sc = SimulationScenario(OUParams(0.3, 0.2, Z), small_design(), Known(300), seed=8)
    a, b = simulate_scenario(sc, 4), simulate_scenario(sc, 4)
    assert a.counts == b.counts and a.realized_n == 300
    assert not simulate_scenario(sc, 5).counts == a.counts
    assert np.all(a.counts.totals() <= 300)


@pytest.mark.parametrize("size", [Known(200), PoissonRate(200.0)], ids=["ecm", "poisson"])
def test_moments_match_theory(size):
    model = OUParams(0.3, 0.2, Z)
    design = small_design()
    sc = SimulationScenario(model, design, size, seed=21)
    R = 10**4
    X = np.array([simulate_scenario(sc, r).counts.flat() for r in range(R)], float)
    mean, cov = ecm_mean_cov(build_path_table(model, design), size)
    mean = np.concatenate(mean)
    se_mean = np.sqrt(np.diag(cov) / R)
    assert np.all(np.abs(X.mean(0) - mean) < 4 * se_mean)
    D = X - X.mean(0)
    prods = D[:, :, None] * D[:, None, :]
    se_cov = prods.std(0) / math.sqrt(R)
    assert np.all(np.abs(prods.mean(0) - cov) < 4 * se_cov + 1e-12)


def test_poisson_realized_size():
    design = SurveyDesign([0.0], [[(0, 0.1, 0, 0.1)]])
    sc = SimulationScenario(OUParams(0.3, 0.2), design, PoissonRate(100.0), seed=1)
    ns = np.array([simulate_scenario(sc, r).realized_n for r in range(10**4)])
    assert abs(ns.mean() - 100) < 3 * math.sqrt(100 / 10**4)


def test_poisson_zero_draw():
    design = SurveyDesign([0.0], [[(0, 0.1, 0, 0.1)]])
    sc = SimulationScenario(OUParams(0.3, 0.2), design, PoissonRate(1e-3), seed=1)
    out = simulate_scenario(sc, 0)
    assert out.realized_n == 0 and out.counts.flat().tolist() == [0]


def test_mixture_explorer_setting():
    alpha, N, R = 0.3682, 93, 400
    design = generate_design(DesignSpec(n_times=6, cells_per_time=(5, 15)), derive_rng(93))
    model = MixtureParams.build(alpha, 0.3, 0.1085, (0.0, 0.0), design.times[0] - 0.5, (0.1, -0.1))
    sc = SimulationScenario(model, design, Known(N), seed=3)
    explorers = []
    for r in range(R):
        out = simulate_scenario(sc, r)
        assert np.all(out.counts.totals() <= N)
        explorers.append(out.explorer.sum())
    sd = math.sqrt(N * alpha * (1 - alpha) / R)
    assert abs(np.mean(explorers) - N * alpha) < 3 * sd
