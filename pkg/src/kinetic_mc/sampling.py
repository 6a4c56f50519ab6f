"""Keyed random streams and the scalar laws used by the particle dynamics.

Every draw in the package goes through an :class:`RngStream`.  A stream is
identified by a 64-bit seed and a tuple of non-negative integers; the tuple is
hashed into the key of a counter-based Philox generator, so any sub-stream can
be rebuilt from its coordinates alone without replaying earlier draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
from scipy import integrate

_SEED_MASK = (1 << 64) - 1


class RngStream:
    """Deterministic stream addressed by ``(seed, key)``.

    The underlying generator is created lazily and advanced by each draw.
    A stream must not be shared between threads; derive children instead.
    """

    __slots__ = ("seed", "key", "_gen")

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if seed < 0 or seed > _SEED_MASK:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        if any(k < 0 for k in key):
            raise ValueError(f"stream key entries must be non-negative, got {key}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._gen: np.random.Generator | None = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
            self._gen = np.random.Generator(np.random.Philox(seq))
        return self._gen

    def child(self, *extra: int) -> RngStream:
        return RngStream(self.seed, self.key + tuple(extra))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"


# --------------------------------------------------------------------------
# Random coefficients


class RandomCoefficient:
    """A real random variable with closed-form integer moments."""

    def support_min(self) -> float:
        raise NotImplementedError

    def support_max(self) -> float:
        raise NotImplementedError

    def raw_moment(self, k: int) -> float:
        raise NotImplementedError

    def expect(self, fn: Callable[[float], float]) -> float:
        """Expectation of ``fn(X)``."""
        raise NotImplementedError

    def sample(self, gen: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def cdf(self, x: float) -> float:
        """``P(X <= x)`` (atoms may be counted on either side)."""
        raise NotImplementedError

    def mean(self) -> float:
        return self.raw_moment(1)

    def variance(self) -> float:
        m = self.raw_moment(1)
        return self.raw_moment(2) - m * m

    def moment(self, s: float) -> float:
        """``E[X**s]``; non-integer orders need a non-negative support."""
        if s == 0:
            return 1.0
        if float(s).is_integer():
            return self.raw_moment(int(s))
        if self.support_min() < 0:
            raise ValueError("fractional moments need a non-negative support")
        return self.expect(lambda x: x**s)

    def abs_moment(self, s: float) -> float:
        return self.expect(lambda x: abs(x) ** s)


@dataclass(frozen=True)
class Deterministic(RandomCoefficient):
    value: float

    def support_min(self) -> float:
        return self.value

    def support_max(self) -> float:
        return self.value

    def raw_moment(self, k: int) -> float:
        return self.value**k

    def expect(self, fn):
        return float(fn(self.value))

    def sample(self, gen, size):
        return np.full(size, self.value, dtype=float)

    def cdf(self, x):
        return 1.0 if x >= self.value else 0.0


@dataclass(frozen=True)
class Uniform(RandomCoefficient):
    low: float
    high: float

    def __post_init__(self):
        if not self.high > self.low:
            raise ValueError(f"Uniform needs low < high, got ({self.low}, {self.high})")

    def support_min(self) -> float:
        return self.low

    def support_max(self) -> float:
        return self.high

    def raw_moment(self, k: int) -> float:
        a, b = self.low, self.high
        return (b ** (k + 1) - a ** (k + 1)) / ((k + 1) * (b - a))

    def expect(self, fn):
        val, _ = integrate.quad(fn, self.low, self.high, epsabs=1e-10, epsrel=1e-12, limit=200)
        return val / (self.high - self.low)

    def sample(self, gen, size):
        return gen.uniform(self.low, self.high, size)

    def cdf(self, x):
        return min(max((x - self.low) / (self.high - self.low), 0.0), 1.0)


@dataclass(frozen=True)
class TwoPoint(RandomCoefficient):
    x1: float
    p1: float
    x2: float
    p2: float

    def __post_init__(self):
        if min(self.p1, self.p2) < 0 or abs(self.p1 + self.p2 - 1.0) > 1e-12:
            raise ValueError("TwoPoint weights must be non-negative and sum to 1")

    def support_min(self) -> float:
        return min(self.x1, self.x2)

    def support_max(self) -> float:
        return max(self.x1, self.x2)

    def raw_moment(self, k: int) -> float:
        return self.p1 * self.x1**k + self.p2 * self.x2**k

    def expect(self, fn):
        return self.p1 * fn(self.x1) + self.p2 * fn(self.x2)

    def sample(self, gen, size):
        return np.where(gen.random(size) < self.p1, self.x1, self.x2)

    def cdf(self, x):
        return (self.p1 if x >= self.x1 else 0.0) + (self.p2 if x >= self.x2 else 0.0)


@dataclass(frozen=True)
class AffineOfBase(RandomCoefficient):
    """``offset + scale * base``."""

    offset: float
    scale: float
    base: RandomCoefficient

    def support_min(self) -> float:
        lo, hi = self.base.support_min(), self.base.support_max()
        return self.offset + min(self.scale * lo, self.scale * hi)

    def support_max(self) -> float:
        lo, hi = self.base.support_min(), self.base.support_max()
        return self.offset + max(self.scale * lo, self.scale * hi)

    def raw_moment(self, k: int) -> float:
        return sum(
            math.comb(k, j) * self.offset ** (k - j) * self.scale**j * self.base.raw_moment(j)
            for j in range(k + 1)
        )

    def expect(self, fn):
        return self.base.expect(lambda x: fn(self.offset + self.scale * x))

    def sample(self, gen, size):
        return self.offset + self.scale * self.base.sample(gen, size)

    def cdf(self, x):
        if self.scale == 0:
            return 1.0 if x >= self.offset else 0.0
        u = (x - self.offset) / self.scale
        return self.base.cdf(u) if self.scale > 0 else 1.0 - self.base.cdf(u)

    def atoms(self) -> list[float]:
        return [self.offset + self.scale * a for a in atoms_of(self.base)]


def atoms_of(c: RandomCoefficient) -> list[float]:
    """Point masses of ``c`` (empty for continuous laws)."""
    if isinstance(c, Deterministic):
        return [c.value]
    if isinstance(c, TwoPoint):
        return [c.x1, c.x2]
    if isinstance(c, AffineOfBase):
        return c.atoms()
    return []


def standard_uniform_noise() -> Uniform:
    """Zero mean, unit variance uniform law on ``[-sqrt(3), sqrt(3)]``."""
    r = math.sqrt(3.0)
    return Uniform(-r, r)


def symmetric_two_point() -> TwoPoint:
    return TwoPoint(-1.0, 0.5, 1.0, 0.5)


# --------------------------------------------------------------------------
# Draws


def _generator(stream: RngStream | np.random.Generator) -> np.random.Generator:
    return stream.generator if isinstance(stream, RngStream) else stream


def draw_bernoulli(stream, r: float, size: int | None = None):
    """Bernoulli(r) as 0/1.  Degenerate rates consume no randomness."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"Bernoulli parameter must lie in [0, 1], got {r}")
    n = 1 if size is None else size
    if r >= 1.0:
        out = np.ones(n, dtype=np.int8)
    elif r <= 0.0:
        out = np.zeros(n, dtype=np.int8)
    else:
        out = (_generator(stream).random(n) < r).astype(np.int8)
    return int(out[0]) if size is None else out


def draw_coefficient(stream, c: RandomCoefficient, size: int | None = None):
    out = c.sample(_generator(stream), 1 if size is None else size)
    return float(out[0]) if size is None else out


def _standard_gamma(gen: np.random.Generator, shape: float, size: int) -> np.ndarray:
    # Marsaglia-Tsang squeeze/rejection; shapes below one use the
    # G(a) = G(a + 1) * U**(1/a) boost.
    boost = shape < 1.0
    a = shape + 1.0 if boost else shape
    d = a - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    out = np.empty(size)
    filled = 0
    while filled < size:
        want = size - filled
        batch = int(want * 1.1) + 16
        x = gen.standard_normal(batch)
        u = gen.random(batch)
        v = 1.0 + c * x
        ok = v > 0
        v = np.where(ok, v * v * v, 1.0)
        with np.errstate(divide="ignore"):
            accept = ok & (np.log(u) < 0.5 * x * x + d - d * v + d * np.log(v))
        got = (d * v)[accept][:want]
        out[filled : filled + got.size] = got
        filled += got.size
    if boost:
        out *= gen.random(size) ** (1.0 / shape)
    return out


def draw_gamma(stream, shape: float, scale: float = 1.0, size: int | None = None):
    if not (shape > 0 and scale > 0):
        raise ValueError(f"gamma parameters must be positive, got shape={shape}, scale={scale}")
    out = scale * _standard_gamma(_generator(stream), shape, 1 if size is None else size)
    return float(out[0]) if size is None else out


def draw_inverse_gamma(stream, shape: float, scale: float, size: int | None = None):
    """``scale / G`` with ``G ~ Gamma(shape, 1)``: density ``∝ v**(-shape-1) exp(-scale/v)``."""
    if not (shape > 0 and scale > 0):
        raise ValueError(f"inverse gamma parameters must be positive, got shape={shape}, scale={scale}")
    g = _standard_gamma(_generator(stream), shape, 1 if size is None else size)
    out = scale / g
    return float(out[0]) if size is None else out


# --------------------------------------------------------------------------
# Initial conditions


class Samplable(Protocol):
    def sample(self, stream: RngStream, n: int) -> np.ndarray: ...


@dataclass(frozen=True)
class UniformInterval:
    low: float
    high: float

    def sample(self, stream, n):
        return _generator(stream).uniform(self.low, self.high, n)

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        inside = (v >= self.low) & (v <= self.high)
        return np.where(inside, 1.0 / (self.high - self.low), 0.0)

    def cdf(self, v):
        v = np.asarray(v, dtype=float)
        return np.clip((v - self.low) / (self.high - self.low), 0.0, 1.0)

    def mean(self) -> float:
        return 0.5 * (self.low + self.high)


@dataclass(frozen=True)
class TwoPointSym:
    """Equal-weight atoms at ``-x`` and ``+x``."""

    x: float

    def sample(self, stream, n):
        signs = np.where(_generator(stream).random(n) < 0.5, -1.0, 1.0)
        return self.x * signs

    def mean(self) -> float:
        return 0.0


@dataclass(frozen=True)
class TwoPointAtoms:
    """Equal-weight atoms at two arbitrary locations."""

    a: float
    b: float

    def sample(self, stream, n):
        return np.where(_generator(stream).random(n) < 0.5, self.a, self.b)

    def mean(self) -> float:
        return 0.5 * (self.a + self.b)


@dataclass(frozen=True)
class EmpiricalHistogram:
    edges: tuple[float, ...]
    density: tuple[float, ...]

    def sample(self, stream, n):
        gen = _generator(stream)
        edges = np.asarray(self.edges)
        mass = np.asarray(self.density) * np.diff(edges)
        cdf = np.cumsum(mass)
        cdf /= cdf[-1]
        b = np.minimum(np.searchsorted(cdf, gen.random(n), side="right"), len(mass) - 1)
        return edges[b] + (edges[b + 1] - edges[b]) * gen.random(n)


def sample_initial_condition(stream: RngStream, f0_spec: Samplable, n: int) -> np.ndarray:
    """``n`` i.i.d. states; ``n`` must be even so every particle has a partner."""
    if n < 2 or n % 2:
        raise ValueError(f"particle count must be even and >= 2, got {n}")
    return np.asarray(f0_spec.sample(stream, n), dtype=float)
