"""Kinetic dynamics on a finite directed graph.

Particles carry a vertex label and a state.  Each step first lets particles
jump along the column-stochastic transition matrix ``P`` and then pairs the
residents of every vertex for binary interactions with that vertex's law.

A particle meets a partner drawn from the whole population and interacts only
when both sit on the same vertex, so the effective interaction frequency in
vertex ``i`` is ``mu_i * rho_i``.  The engine realises this by pairing inside
each vertex and gating every pair with probability ``mu_i * rho_i * dt``.
"""

from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence, Union

import numpy as np
from scipy import integrate

from .fourier_metrics import empirical_cf, graph_distance, xi_grid
from .kinetics import InteractionLaw
from .moments import rk4
from .montecarlo import (
    PAIR_BLOCK,
    PURPOSE_INTERACT,
    PURPOSE_MIGRATE,
    PURPOSE_PERMUTE,
    interact_pairs,
    step_count,
)
from .sampling import RngStream, atoms_of

STOCHASTIC_TOL = 1e-12
POWER_TOL = 1e-12
POWER_MAX_ITER = 10_000


class NotStronglyConnected(ValueError):
    pass


class RateOverflow(ValueError):
    pass


class PowerIterationStalled(RuntimeError):
    pass


@dataclass(frozen=True)
class PerVertex:
    """Fixed interaction frequency per vertex."""

    mus: tuple[float, ...]

    def __post_init__(self):
        if any(m < 0 for m in self.mus):
            raise ValueError("interaction frequencies must be non-negative")


@dataclass(frozen=True)
class Normalized:
    """``mu_i = mu / rho_i``: every vertex interacts at total frequency ``mu``."""

    mu: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")


MuSpec = Union[PerVertex, Normalized]


def _check_column_stochastic(P: np.ndarray) -> None:
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
        raise ValueError(f"transition matrix must be square, got shape {P.shape}")
    if np.any(P < -STOCHASTIC_TOL) or np.any(P > 1 + STOCHASTIC_TOL):
        raise ValueError("transition probabilities must lie in [0, 1]")
    sums = P.sum(axis=0)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-10)
    if bad.size:
        j = int(bad[0])
        raise ValueError(f"column {j} of the transition matrix sums to {sums[j]:.12g}, not 1")


@dataclass(frozen=True)
class GraphModel:
    P: np.ndarray
    chi: float
    mu_spec: MuSpec
    laws: tuple[InteractionLaw, ...]
    weights: np.ndarray | None = None

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        _check_column_stochastic(P)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "laws", tuple(self.laws))
        if not self.chi > 0:
            raise ValueError("migration rate chi must be positive")
        if len(self.laws) != P.shape[0]:
            raise ValueError(f"need one interaction law per vertex ({P.shape[0]}), got {len(self.laws)}")
        if isinstance(self.mu_spec, PerVertex) and len(self.mu_spec.mus) != P.shape[0]:
            raise ValueError("need one interaction frequency per vertex")

    @classmethod
    def from_weights(cls, A, chi: float, mu_spec: MuSpec, laws: Sequence[InteractionLaw]) -> GraphModel:
        """Normalise each column of the weight matrix ``A`` into transition probabilities."""
        A = np.array(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"weight matrix must be square, got shape {A.shape}")
        if np.any(A < 0):
            raise ValueError("weights must be non-negative")
        sums = A.sum(axis=0)
        zero = np.flatnonzero(sums <= 0)
        if zero.size:
            raise ValueError(f"column {int(zero[0])} of the weight matrix has zero sum")
        return cls(A / sums, chi, mu_spec, tuple(laws), weights=A)

    @property
    def N(self) -> int:
        return self.P.shape[0]

    def interaction_rates(self, rho, floor: float = 1e-12) -> np.ndarray:
        """Per-vertex frequencies ``mu_i``, with ``rho`` clamped below at ``floor``."""
        if isinstance(self.mu_spec, PerVertex):
            return np.array(self.mu_spec.mus, dtype=float)
        return self.mu_spec.mu / np.maximum(np.asarray(rho, dtype=float), floor)


def is_strongly_connected(g: GraphModel | np.ndarray) -> bool:
    P = np.asarray(g.P if isinstance(g, GraphModel) else g)
    # Edge j -> i whenever P[i, j] > 0.
    adj = P > 0

    def reaches_all(forward: np.ndarray) -> bool:
        seen = np.zeros(forward.shape[0], dtype=bool)
        seen[0] = True
        queue = deque([0])
        while queue:
            j = queue.popleft()
            for i in np.flatnonzero(forward[:, j] & ~seen):
                seen[i] = True
                queue.append(int(i))
        return bool(seen.all())

    return reaches_all(adj) and reaches_all(adj.T)


def density_ode_solve(g: GraphModel, rho0, T: float, dt_ode: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """RK4 trace of ``d rho/dt = chi (P rho - rho)``; returns ``(times, rho[t, i])``."""
    rho0 = np.asarray(rho0, dtype=float)
    if rho0.shape != (g.N,):
        raise ValueError(f"initial masses must have shape ({g.N},)")
    if np.any(rho0 < 0):
        raise ValueError("initial masses must be non-negative")
    if abs(rho0.sum() - 1.0) > 1e-12:
        raise ValueError("initial masses must sum to 1")
    if dt_ode * g.chi * 2 > 1.0:
        raise ValueError(f"dt_ode={dt_ode:g} too large for chi={g.chi:g}")
    P, chi = g.P, g.chi
    return rk4(lambda r: chi * (P @ r - r), rho0, T, dt_ode)


def density_equilibrium(g: GraphModel, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> np.ndarray:
    """Unit-sum Perron vector of ``P`` by power iteration.

    The iteration runs on the lazy matrix ``(P + I)/2``, which has the same
    fixed point and no other eigenvalue on the unit circle.
    """
    if not is_strongly_connected(g):
        raise NotStronglyConnected("the equilibrium is unique only on strongly connected graphs")
    P = g.P
    lazy = 0.5 * (P + np.eye(g.N))
    rho = np.full(g.N, 1.0 / g.N)
    for _ in range(max_iter):
        rho = lazy @ rho
        rho /= rho.sum()
        if np.max(np.abs(P @ rho - rho)) <= tol:
            return rho
    raise PowerIterationStalled(f"power iteration did not reach residual {tol:g} in {max_iter} steps")


def scale_transitions(g: GraphModel, eps: float) -> GraphModel:
    """Shrink every off-diagonal jump probability by ``eps``; the diagonal absorbs the rest."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    off = g.P * (1.0 - np.eye(g.N)) * eps
    diag = 1.0 - off.sum(axis=0)
    if np.any(diag < -STOCHASTIC_TOL):
        j = int(np.argmin(diag))
        raise ValueError(f"eps={eps:g} makes the diagonal entry of column {j} negative")
    P = off + np.diag(np.clip(diag, 0.0, 1.0))
    return replace(g, P=P, weights=None)


# --------------------------------------------------------------------------
# Particle engine


@dataclass
class GraphEnsemble:
    vertex: np.ndarray
    states: np.ndarray
    dt: float
    seed: int
    t: float = 0.0
    iteration: int = 0
    run_id: int = 0

    def __post_init__(self):
        self.vertex = np.ascontiguousarray(self.vertex, dtype=np.int64)
        self.states = np.ascontiguousarray(self.states, dtype=float)
        if self.vertex.shape != self.states.shape or self.states.ndim != 1:
            raise ValueError("vertex and state arrays must be one-dimensional and equally long")
        if self.states.size < 2:
            raise ValueError("need at least two particles")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def size(self) -> int:
        return self.states.size

    def masses(self, N: int) -> np.ndarray:
        return np.bincount(self.vertex, minlength=N) / self.size

    def residents(self, i: int) -> np.ndarray:
        return self.states[self.vertex == i]

    def copy(self) -> GraphEnsemble:
        return replace(self, vertex=self.vertex.copy(), states=self.states.copy())


@dataclass
class GraphTrace:
    times: list[float] = field(default_factory=list)
    series: dict[str, list] = field(default_factory=dict)
    final: GraphEnsemble | None = None

    def record(self, e: GraphEnsemble, observers: Mapping[str, Callable[[GraphEnsemble], object]]):
        self.times.append(e.t)
        for name, fn in observers.items():
            self.series.setdefault(name, []).append(fn(e))


def _migrate(e: GraphEnsemble, P: np.ndarray, jump_prob: float) -> None:
    if jump_prob <= 0:
        return
    cum = np.cumsum(P, axis=0)
    cum[-1] = 1.0
    for b, s in enumerate(range(0, e.size, PAIR_BLOCK)):
        sl = slice(s, min(s + PAIR_BLOCK, e.size))
        gen = RngStream(e.seed, (e.run_id, e.iteration, PURPOSE_MIGRATE, b)).generator
        n = sl.stop - sl.start
        xi = gen.random(n) < jump_prob
        u = gen.random(n)
        src = e.vertex[sl]
        moving = np.flatnonzero(xi)
        if moving.size == 0:
            continue
        cols = cum[:, src[moving]]
        dest = (u[moving][None, :] >= cols).sum(axis=0)
        src[moving] = np.minimum(dest, P.shape[0] - 1)


def graph_step(
    e: GraphEnsemble,
    g: GraphModel,
    pool: ThreadPoolExecutor | None = None,
    rate_scale: float = 1.0,
) -> GraphEnsemble:
    """Advance the graph ensemble by one step (in place): migrate, then interact per vertex.

    ``rate_scale`` multiplies both the jump and the interaction frequencies
    (``1/eps`` for quasi-invariant runs).
    """
    N = g.N
    jump_prob = g.chi * e.dt * rate_scale
    if jump_prob > 1 + 1e-12:
        raise RateOverflow(f"chi*dt = {jump_prob:.6g} exceeds 1")
    _migrate(e, g.P, min(jump_prob, 1.0))

    counts = np.bincount(e.vertex, minlength=N)
    rho_hat = counts / e.size
    # An empty vertex has nobody to pair, so the clamp only keeps mu_i finite.
    gates = g.interaction_rates(rho_hat, floor=1.0 / e.size) * rho_hat * e.dt * rate_scale
    over = np.flatnonzero(gates > 1 + 1e-12)
    if over.size:
        i = int(over[0])
        raise RateOverflow(f"interaction probability {gates[i]:.6g} exceeds 1 on vertex {i}")

    # Storage is regrouped by vertex, each group in its shuffled order, so a
    # one-vertex graph lays particles out exactly like the homogeneous engine.
    order = np.argsort(e.vertex, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)])
    for i in range(N):
        n_i = int(counts[i])
        if n_i >= 2:
            gen = RngStream(e.seed, (e.run_id, e.iteration, PURPOSE_PERMUTE, i)).generator
            block = order[starts[i] : starts[i + 1]]
            order[starts[i] : starts[i + 1]] = block[gen.permutation(n_i)]
    e.states = e.states[order]
    e.vertex = e.vertex[order]
    for i in range(N):
        rate = min(float(gates[i]), 1.0)
        # With an odd count the last shuffled resident sits out.
        h = int(counts[i]) // 2
        if h == 0 or rate <= 0:
            continue
        s = int(starts[i])
        x, y = e.states[s : s + h], e.states[s + h : s + 2 * h]
        base = RngStream(e.seed, (e.run_id, e.iteration, PURPOSE_INTERACT, i))
        interact_pairs(x, y, base, rate, g.laws[i], pool)
    e.iteration += 1
    e.t = e.iteration * e.dt
    return e


def run_graph(
    e0: GraphEnsemble,
    g: GraphModel,
    T: float,
    observers: Mapping[str, Callable[[GraphEnsemble], object]] | None = None,
    callbacks: Sequence[Callable[[GraphEnsemble], None]] = (),
    workers: int = 1,
    record_every: int = 1,
    rate_scale: float = 1.0,
) -> GraphTrace:
    if not T > 0:
        raise ValueError("T must be positive")
    if np.any(e0.vertex < 0) or np.any(e0.vertex >= g.N):
        raise ValueError("vertex labels out of range")
    observers = observers or {}
    e = e0.copy()
    trace = GraphTrace()
    n_steps = step_count(T, e.dt)
    trace.record(e, observers)
    for cb in callbacks:
        cb(e)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for k in range(1, n_steps + 1):
            graph_step(e, g, pool, rate_scale)
            if k % record_every == 0 or k == n_steps:
                trace.record(e, observers)
            for cb in callbacks:
                cb(e)
    finally:
        if pool is not None:
            pool.shutdown()
    trace.final = e
    return trace


def run_graph_quasi_invariant(e0: GraphEnsemble, g: GraphModel, eps: float, T: float, **kwargs) -> GraphTrace:
    """Scaled-time run: transitions shrunk by ``eps``, all frequencies sped up by ``1/eps``.

    ``g.laws`` must already be the ``eps``-laws.  The net jump probability
    per step stays ``chi * dt * P_ij`` off the diagonal.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if e0.dt > eps / g.chi * (1 + 1e-12):
        raise ValueError(f"time step {e0.dt:g} must not exceed eps/chi={eps / g.chi:g}")
    return run_graph(e0, scale_transitions(g, eps), T, rate_scale=1.0 / eps, **kwargs)


# --------------------------------------------------------------------------
# Diagnostics


@dataclass(frozen=True)
class L2Condition:
    lhs: float
    rhs: float
    satisfied: bool


def _expected_inv_sqrt_min(coefs) -> float:
    """``E[1/sqrt(min_i c_i)]`` for independent non-negative coefficients."""
    lo = min(c.support_min() for c in coefs)
    if lo <= 0:
        raise ValueError("the smallest coefficient must be bounded away from zero")
    hi = min(c.support_max() for c in coefs)
    if hi <= lo:
        return 1.0 / math.sqrt(lo)

    # E[Y] = int_0^inf P(Y > y) dy with Y = min^(-1/2), i.e. P(min < y^-2).
    def tail(y):
        x = y**-2.0
        return 1.0 - math.prod(1.0 - c.cdf(x) for c in coefs)

    y_lo, y_hi = 1.0 / math.sqrt(hi), 1.0 / math.sqrt(lo)
    breaks = sorted({1.0 / math.sqrt(a) for c in coefs for a in atoms_of(c) if lo < a < hi})
    val, _ = integrate.quad(tail, y_lo, y_hi, points=breaks or None, epsabs=1e-12, epsrel=1e-12, limit=400)
    return y_lo + val


def l2_decay_condition(g: GraphModel) -> L2Condition:
    """Sufficient condition for the summed L2 norms of the vertex densities to decay."""
    if not isinstance(g.mu_spec, Normalized):
        raise ValueError("the L2 decay condition is stated for normalized interaction frequencies")
    lhs = _expected_inv_sqrt_min([law.p for law in g.laws]) + _expected_inv_sqrt_min([law.q for law in g.laws])
    rhs = 1.0 - (g.chi / g.mu_spec.mu) * (g.N - 1)
    return L2Condition(lhs, rhs, lhs < rhs)


@dataclass(frozen=True)
class D2Report:
    times: np.ndarray
    distances: np.ndarray
    slope: float
    slope_se: float
    envelope_rate: float
    passed: bool
    coupling: str = "shared seed: migration, pairing and coefficient draws are identical in both runs"
    centering: str = "each vertex sample is shifted to the common mean before its characteristic function is taken"


def _fit_log_slope(t: np.ndarray, d: np.ndarray) -> tuple[float, float]:
    keep = d > 0
    t, y = t[keep], np.log(d[keep])
    if t.size < 3:
        raise ValueError("need at least three positive distances to fit a slope")
    A = np.column_stack([np.ones_like(t), t])
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    s2 = float(resid @ resid) / (t.size - 2)
    cov = s2 * np.linalg.inv(A.T @ A)
    return float(coef[1]), float(math.sqrt(cov[1, 1]))


def d2_contraction_experiment(
    g: GraphModel,
    vertex0,
    f0,
    g0,
    T: float,
    dt: float,
    seed: int,
    snapshots: int = 10,
    grid=None,
    workers: int = 1,
) -> D2Report:
    """Coupled runs from two initial data with the same vertex layout; fits ``log D_2(t)``.

    ``f0`` and ``g0`` are state arrays aligned with ``vertex0``.  Both runs
    share every random draw, so the mass trajectory is the same in each.
    """
    if not isinstance(g.mu_spec, Normalized):
        raise ValueError("the contraction experiment needs normalized interaction frequencies")
    vertex0 = np.asarray(vertex0)
    f0, g0 = np.asarray(f0, dtype=float), np.asarray(g0, dtype=float)
    if f0.shape != vertex0.shape or g0.shape != vertex0.shape:
        raise ValueError("initial data must align with the vertex layout")
    counts = np.bincount(vertex0, minlength=g.N)
    if np.any(counts == 0):
        raise ValueError("every vertex needs a positive initial mass")
    common = float(np.mean(f0))
    if abs(np.mean(g0) - common) > 1e-9 * max(1.0, abs(common)):
        raise ValueError("both initial data must have the same mean")
    grid = xi_grid() if grid is None else np.asarray(grid, dtype=float)
    n_steps = step_count(T, dt)
    every = max(1, n_steps // snapshots)

    def cfs(e: GraphEnsemble):
        out = []
        for i in range(g.N):
            v = e.residents(i)
            out.append(empirical_cf(v - v.mean() + common, grid) if v.size else None)
        return out

    def distance(ef: GraphEnsemble, eg: GraphEnsemble) -> float:
        rho = ef.masses(g.N)
        F, G = cfs(ef), cfs(eg)
        live = [i for i in range(g.N) if F[i] is not None]
        return graph_distance(rho[live], [F[i] for i in live], [G[i] for i in live], 2.0, grid)

    traces = []
    for states in (f0, g0):
        e = GraphEnsemble(vertex0, states, dt, seed)
        traces.append(run_graph(e, g, T, observers={"ens": lambda x: x.copy()}, record_every=every, workers=workers))
    times = np.array(traces[0].times)
    dists = np.array([distance(a, b) for a, b in zip(traces[0].series["ens"], traces[1].series["ens"])])
    envelope = g.mu_spec.mu * (max(law.energy_sum for law in g.laws) - 1.0)
    if np.all(dists == 0):
        return D2Report(times, dists, -math.inf, 0.0, envelope, True)
    slope, se = _fit_log_slope(times, dists)
    return D2Report(times, dists, slope, se, envelope, slope <= envelope + 3 * se)
