"""Binary-collision particle engine for the homogeneous kinetic equation.

Each step shuffles the population, pairs slot ``i`` with slot ``i + N/2`` and
lets every pair interact with a fixed probability.  Randomness for the
shuffle and for each block of pairs comes from its own keyed stream, so the
result does not depend on how many threads process the blocks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .kinetics import InteractionLaw, ScalingRegime, materialize
from .sampling import RngStream, draw_bernoulli, draw_coefficient

# Stream purposes.  The graph engine shares the same layout so that a
# one-vertex graph reproduces this module draw for draw.
PURPOSE_INIT = 0
PURPOSE_PERMUTE = 1
PURPOSE_INTERACT = 2
PURPOSE_MIGRATE = 3

PAIR_BLOCK = 1 << 15
MAX_MOMENT_ORDER = 8


@dataclass
class Ensemble:
    states: np.ndarray
    dt: float
    interaction_rate_param: float
    seed: int
    t: float = 0.0
    iteration: int = 0
    run_id: int = 0

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=float)
        n = self.states.size
        if n < 2 or n % 2:
            raise ValueError(f"particle count must be even and >= 2, got {n}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 <= self.interaction_rate_param <= 1:
            raise ValueError(f"interaction probability per step must lie in [0, 1], got {self.interaction_rate_param}")

    @property
    def size(self) -> int:
        return self.states.size

    def copy(self) -> Ensemble:
        return replace(self, states=self.states.copy())


@dataclass
class EnsembleTrace:
    times: list[float] = field(default_factory=list)
    series: dict[str, list[float]] = field(default_factory=dict)
    final: Ensemble | None = None

    def record(self, t: float, states: np.ndarray, observers: Mapping[str, Callable[[np.ndarray], float]]):
        self.times.append(t)
        for name, fn in observers.items():
            self.series.setdefault(name, []).append(float(fn(states)))


def pair_update(x: np.ndarray, y: np.ndarray, stream: RngStream, rate: float, law: InteractionLaw) -> None:
    """Interact ``x[k]`` with ``y[k]`` in place, each pair with probability ``rate``."""
    n = x.size
    theta = draw_bernoulli(stream, rate, n)
    p = draw_coefficient(stream, law.p, n)
    q = draw_coefficient(stream, law.q, n)
    new_x = p * x + q * y
    new_y = p * y + q * x
    if rate >= 1.0:
        x[:] = new_x
        y[:] = new_y
    else:
        hit = theta.astype(bool)
        x[hit] = new_x[hit]
        y[hit] = new_y[hit]


def interact_pairs(
    x: np.ndarray,
    y: np.ndarray,
    base: RngStream,
    rate: float,
    law: InteractionLaw,
    pool: ThreadPoolExecutor | None = None,
) -> None:
    """Run :func:`pair_update` over fixed-size blocks keyed by block index."""
    blocks = [(b, slice(s, min(s + PAIR_BLOCK, x.size))) for b, s in enumerate(range(0, x.size, PAIR_BLOCK))]

    def work(item):
        b, sl = item
        pair_update(x[sl], y[sl], base.child(b), rate, law)

    if pool is None or len(blocks) == 1:
        for item in blocks:
            work(item)
    else:
        list(pool.map(work, blocks))


def step(e: Ensemble, law: InteractionLaw, pool: ThreadPoolExecutor | None = None) -> Ensemble:
    """Advance the ensemble by one time step (in place) and return it."""
    gen = RngStream(e.seed, (e.run_id, e.iteration, PURPOSE_PERMUTE, 0)).generator
    e.states = e.states[gen.permutation(e.size)]
    half = e.size // 2
    # Views into the shuffled array; block updates write straight through.
    x, y = e.states[:half], e.states[half:]
    base = RngStream(e.seed, (e.run_id, e.iteration, PURPOSE_INTERACT, 0))
    interact_pairs(x, y, base, e.interaction_rate_param, law, pool)
    e.iteration += 1
    e.t = e.iteration * e.dt
    return e


def step_count(T: float, dt: float) -> int:
    # Guard against T/dt landing a hair below an integer.
    return int(math.floor(T / dt * (1 + 1e-12)))


def run(
    e0: Ensemble,
    law: InteractionLaw,
    T: float,
    observers: Mapping[str, Callable[[np.ndarray], float]] | None = None,
    callbacks: Sequence[Callable[[Ensemble], None]] = (),
    workers: int = 1,
    record_every: int = 1,
) -> EnsembleTrace:
    """Execute ``floor(T/dt)`` steps on a copy of ``e0``.

    ``observers`` map names to statistics of the state array and are recorded
    at the start and after every ``record_every`` steps; ``callbacks`` see the
    ensemble after every step (and once before the first).
    """
    if not T > 0:
        raise ValueError("T must be positive")
    observers = observers or {}
    e = e0.copy()
    trace = EnsembleTrace()
    n_steps = step_count(T, e.dt)
    trace.record(e.t, e.states, observers)
    for cb in callbacks:
        cb(e)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for k in range(1, n_steps + 1):
            step(e, law, pool)
            if k % record_every == 0 or k == n_steps:
                trace.record(e.t, e.states, observers)
            for cb in callbacks:
                cb(e)
    finally:
        if pool is not None:
            pool.shutdown()
    trace.final = e
    return trace


def quasi_invariant_ensemble(states, dt: float, eps: float, seed: int, run_id: int = 0) -> Ensemble:
    if dt > eps * (1 + 1e-12):
        raise ValueError(f"time step {dt:g} must not exceed eps={eps:g}")
    return Ensemble(states, dt, min(dt / eps, 1.0), seed, run_id=run_id)


def run_quasi_invariant(
    e0: Ensemble,
    regime: ScalingRegime,
    eps: float,
    T: float,
    observers=None,
    callbacks=(),
    workers: int = 1,
    record_every: int = 1,
) -> EnsembleTrace:
    """Scaled-time run: pairs meet with probability ``dt/eps`` under the eps-law."""
    law, _ = materialize(regime, eps)
    if e0.dt > eps * (1 + 1e-12):
        raise ValueError(f"time step {e0.dt:g} must not exceed eps={eps:g}")
    e = replace(e0, interaction_rate_param=min(e0.dt / eps, 1.0))
    return run(e, law, T, observers, callbacks, workers, record_every)


# --------------------------------------------------------------------------
# Histograms and moments


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    density: np.ndarray
    n_samples: int
    underflow: int = 0
    overflow: int = 0

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def masses(self) -> np.ndarray:
        return self.density * self.widths


def default_edges(states, bins: int = 100, clip_tails: bool = False) -> np.ndarray:
    """``bins`` equal bins over the sample range, optionally clipped to the
    0.1%-99.9% quantiles for fat-tailed samples."""
    states = np.asarray(states)
    if clip_tails:
        lo, hi = np.quantile(states, [0.001, 0.999])
    else:
        lo, hi = states.min(), states.max()
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def histogram(states, edges=None, *, range=None, bins: int = 100) -> Histogram:
    states = np.asarray(states, dtype=float)
    if states.size == 0:
        raise ValueError("cannot build a histogram from an empty sample")
    if edges is None:
        if range is None:
            edges = default_edges(states, bins)
        else:
            lo, hi = range
            if not hi > lo or bins < 1:
                raise ValueError("histogram range must be nondegenerate and bins >= 1")
            edges = np.linspace(lo, hi, bins + 1)
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("edges must be strictly increasing with at least two entries")
    counts, _ = np.histogram(states, edges)
    n = states.size
    density = counts / (n * np.diff(edges))
    under = int(np.count_nonzero(states < edges[0]))
    over = int(np.count_nonzero(states > edges[-1]))
    return Histogram(edges, density, n, under, over)


def ensemble_moment(states, n: int) -> float:
    if not 0 <= n <= MAX_MOMENT_ORDER:
        raise ValueError(f"moment order must lie in [0, {MAX_MOMENT_ORDER}]")
    states = np.asarray(states, dtype=float)
    # numpy reduces contiguous arrays pairwise.
    return float(np.mean(states**n))


def ensemble_variance(states) -> float:
    m1 = ensemble_moment(states, 1)
    var = ensemble_moment(states, 2) - m1 * m1
    if var < -1e-12:
        raise ArithmeticError(f"negative variance {var}")
    return max(var, 0.0)


def l1_to_density(h: Histogram, cdf: Callable[[np.ndarray], np.ndarray], mass: float = 1.0) -> float:
    """Sum over bins of |histogram mass - exact mass| for a law with the given CDF.

    Mass below the first and above the last edge counts as two extra bins.
    ``mass`` is the total of the exact law, e.g. a vertex occupancy, which is
    divided out so both sides are probability laws.
    """
    c = np.asarray(cdf(h.edges), dtype=float) / mass
    inside = float(np.sum(np.abs(h.masses - np.diff(c))))
    below = abs(h.underflow / h.n_samples - c[0])
    above = abs(h.overflow / h.n_samples - (1.0 - c[-1]))
    return inside + below + above
