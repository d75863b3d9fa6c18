"""Survey designs, exact trajectory sampling and count arrangements."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CountArrangement, Known, PoissonRate, PopulationSize
from .gaussprob import Interval, Rect2D
from .movement import (
    BrownianParams,
    ConditionedOUParams,
    MixtureParams,
    MovementModel,
    OUParams,
    SurveyDesign,
)


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``; string keys are hashed stably."""
    words = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            words.append(int.from_bytes(key.encode()[:8].ljust(8, b"\0"), "little"))
        else:
            words.append(int(key))
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass(frozen=True)
class DesignSpec:
    n_times: int = 10
    time_window: Interval = Interval(0.0, 10.0)
    cells_per_time: tuple[int, int] = (10, 50)
    cell_side: float = 0.1
    placement_domain: Rect2D = Rect2D(Interval(-1.0, 1.0), Interval(-1.0, 1.0))
    max_rejections: int = 100_000

    def __post_init__(self):
        lo, hi = self.cells_per_time
        if self.n_times < 1 or lo < 1 or hi < lo or not self.cell_side > 0:
            raise ValueError("invalid design spec")
        d = self.placement_domain
        if d.x.width < self.cell_side or d.y.width < self.cell_side:
            raise ValueError("cells do not fit in the placement domain")


def generate_design(spec: DesignSpec, rng: np.random.Generator) -> SurveyDesign:
    """Random times in the window and non-overlapping random squares per time."""
    w = spec.time_window
    times = np.sort(rng.uniform(w.lo, w.hi, spec.n_times))
    if np.any(np.diff(times) <= 0):
        raise ValueError("duplicate survey times drawn")
    d, side = spec.placement_domain, spec.cell_side
    bounds = []
    for _ in range(spec.n_times):
        target = int(rng.integers(spec.cells_per_time[0], spec.cells_per_time[1] + 1))
        cells = np.empty((target, 4))
        placed = rejections = 0
        while placed < target:
            x = rng.uniform(d.x.lo, d.x.hi - side)
            y = rng.uniform(d.y.lo, d.y.hi - side)
            c = cells[:placed]
            clash = (c[:, 0] < x + side) & (x < c[:, 1]) & (c[:, 2] < y + side) & (y < c[:, 3])
            if clash.any():
                rejections += 1
                if rejections > spec.max_rejections:
                    raise RuntimeError("could not place disjoint cells; domain too crowded")
                continue
            cells[placed] = (x, x + side, y, y + side)
            placed += 1
        bounds.append(cells)
    return SurveyDesign(times, bounds)


def _ou_path(tau, theta, z, start, start_sd, times, t_start, count, rng):
    """Exact OU transitions from a Gaussian start at ``t_start``."""
    out = np.empty((count, times.size, 2))
    x = start + start_sd * rng.standard_normal((count, 2))
    prev = t_start
    for k, t in enumerate(times):
        dt = t - prev
        if dt < 0:
            raise ValueError("times before the start time")
        a = np.exp(-theta * dt)
        sd = tau * np.sqrt(-np.expm1(-2 * theta * dt))
        x = z + (x - z) * a + sd * rng.standard_normal((count, 2))
        out[:, k] = x
        prev = t
    return out


def _brownian_path(sigma, x0, t0, times, count, rng):
    dt = np.diff(np.concatenate(([t0], times)))
    if np.any(dt < 0):
        raise ValueError("times before the start time")
    steps = sigma * np.sqrt(dt)[None, :, None] * rng.standard_normal((count, times.size, 2))
    return np.asarray(x0) + np.cumsum(steps, axis=1)


def sample_trajectories(model: MovementModel, times, count: int, rng: np.random.Generator):
    """Positions of ``count`` individuals at ``times``.

    Returns
    -------
    positions : ndarray, shape (count, n, 2)
    explorer : ndarray of bool or None
        Per-individual Brownian flag for mixtures.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be increasing")
    count = int(count)
    if isinstance(model, OUParams):
        z = np.array(model.z)
        return _ou_path(model.tau, model.theta, z, z, model.tau, times, times[0], count, rng), None
    if isinstance(model, ConditionedOUParams):
        b = model.base
        return _ou_path(b.tau, b.theta, np.array(b.z), np.array(model.x0), 0.0, times, model.t0, count, rng), None
    if isinstance(model, BrownianParams):
        return _brownian_path(model.sigma, model.x0, model.t0, times, count, rng), None
    if isinstance(model, MixtureParams):
        explorer = rng.random(count) < model.alpha
        out = np.empty((count, times.size, 2))
        n_b = int(explorer.sum())
        out[explorer] = _brownian_path(model.brownian.sigma, model.brownian.x0, model.brownian.t0, times, n_b, rng)
        o = model.ou
        out[~explorer] = _ou_path(
            o.base.tau, o.base.theta, np.array(o.base.z), np.array(o.x0), 0.0, times, o.t0, count - n_b, rng
        )
        return out, explorer
    raise TypeError(f"unsupported movement model {type(model).__name__}")


def count_arrangement(positions: np.ndarray, design: SurveyDesign) -> CountArrangement:
    """Count individuals per cell with half-open membership ``[lo, hi)``."""
    positions = np.asarray(positions, dtype=float).reshape(-1, design.times.size, 2)
    rows = []
    for k, b in enumerate(design.bounds):
        x = positions[:, k, 0][:, None]
        y = positions[:, k, 1][:, None]
        inside = (b[:, 0] <= x) & (x < b[:, 1]) & (b[:, 2] <= y) & (y < b[:, 3])
        rows.append(inside.sum(0))
    return CountArrangement(rows)


@dataclass(frozen=True)
class SimulationScenario:
    model: MovementModel
    design: SurveyDesign
    size: PopulationSize
    seed: int = 0


@dataclass
class SimulatedCounts:
    """Counts plus diagnostics that estimators never read."""

    counts: CountArrangement
    realized_n: int
    explorer: np.ndarray | None = field(default=None, repr=False)


def simulate_scenario(scenario: SimulationScenario, replicate: int = 0) -> SimulatedCounts:
    """One dataset; the stream is derived from ``(scenario.seed, replicate)``."""
    rng = derive_rng(scenario.seed, replicate)
    size = scenario.size
    if isinstance(size, Known):
        n = size.N
    elif isinstance(size, PoissonRate):
        n = int(rng.poisson(size.rate))
    else:
        raise TypeError("size must be Known or PoissonRate")
    pos, explorer = sample_trajectories(scenario.model, scenario.design.times, n, rng)
    return SimulatedCounts(count_arrangement(pos, scenario.design), n, explorer)
