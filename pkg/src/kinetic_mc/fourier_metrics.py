"""Characteristic functions and the Fourier distances built on them.

Characteristic functions use the ``exp(-i xi v)`` convention.  The supremum
over all nonzero frequencies is approximated by a maximum over a symmetric,
log-spaced grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .montecarlo import Histogram

DEFAULT_XI_MIN = 1e-4
DEFAULT_XI_MAX = 1e2
DEFAULT_XI_POINTS = 512
_SAMPLE_CHUNK = 1 << 14


class MomentMismatchWarning(RuntimeWarning):
    pass


def xi_grid(xi_min: float = DEFAULT_XI_MIN, xi_max: float = DEFAULT_XI_MAX, points: int = DEFAULT_XI_POINTS) -> np.ndarray:
    """Negative half then positive half, each ``points`` log-spaced magnitudes."""
    if not 0 < xi_min < xi_max:
        raise ValueError("need 0 < xi_min < xi_max")
    pos = np.geomspace(xi_min, xi_max, points)
    return np.concatenate([-pos[::-1], pos])


@dataclass(frozen=True)
class EmpiricalCF:
    xi: np.ndarray
    values: np.ndarray
    n_samples: int
    moments: tuple[float, ...] = ()

    def at(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if xi.shape != self.xi.shape or np.any(xi != self.xi):
            raise ValueError("empirical characteristic functions are only known on their own grid")
        return self.values


@dataclass(frozen=True)
class AnalyticCF:
    fn: Callable[[np.ndarray], np.ndarray]
    moments: tuple[float, ...] = ()

    def at(self, xi) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(xi, dtype=float)), dtype=complex)


def dirac_cf(location: float) -> AnalyticCF:
    return AnalyticCF(lambda xi: np.exp(-1j * xi * location), (location, location**2, location**3))


def gaussian_cf(mean: float, variance: float) -> AnalyticCF:
    return AnalyticCF(
        lambda xi: np.exp(-1j * xi * mean - 0.5 * variance * xi * xi),
        (mean, variance + mean**2, mean**3 + 3 * mean * variance),
    )


def empirical_cf(states, grid=None) -> EmpiricalCF:
    """``(1/n) sum_k exp(-i xi v_k)`` on the grid.

    Only non-negative frequencies are summed; the rest follow by conjugation,
    which makes the symmetry exact.
    """
    v = np.asarray(states, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("empirical characteristic function of an empty sample")
    xi = xi_grid() if grid is None else np.asarray(grid, dtype=float)
    if np.any(xi == 0):
        raise ValueError("the frequency grid must exclude 0")
    mags, inverse = np.unique(np.abs(xi), return_inverse=True)
    re = np.zeros(mags.size)
    im = np.zeros(mags.size)
    # Sample chunks keep the (frequency x sample) block small; numpy sums each
    # row pairwise.
    for s in range(0, v.size, _SAMPLE_CHUNK):
        phase = np.outer(mags, v[s : s + _SAMPLE_CHUNK])
        re += np.cos(phase).sum(axis=1)
        im -= np.sin(phase).sum(axis=1)
    pos = (re + 1j * im) / v.size
    modulus = np.abs(pos)
    pos = np.where(modulus > 1.0, pos / np.maximum(modulus, 1.0), pos)
    values = np.where(xi > 0, pos[inverse], np.conj(pos[inverse]))
    moments = tuple(float(np.mean(v**k)) for k in (1, 2, 3))
    return EmpiricalCF(xi, values, v.size, moments)


def _check_moments(a, b, s: float, tol: float) -> None:
    # Finiteness needs equal moments up to order ceil(s) - 1.
    needed = max(math.ceil(s) - 1, 0)
    ma, mb = getattr(a, "moments", ()), getattr(b, "moments", ())
    for k in range(min(needed, len(ma), len(mb))):
        scale = max(1.0, abs(ma[k]), abs(mb[k]))
        if abs(ma[k] - mb[k]) > tol * scale:
            warnings.warn(
                f"moment {k + 1} differs ({ma[k]:.6g} vs {mb[k]:.6g}); the order-{s:g} distance "
                "is infinite and the grid value only reflects the grid truncation",
                MomentMismatchWarning,
                stacklevel=3,
            )
            return


def _grid_of(a, b, grid):
    if grid is not None:
        return np.asarray(grid, dtype=float)
    for obj in (a, b):
        if isinstance(obj, EmpiricalCF):
            return obj.xi
    return xi_grid()


def fourier_distance(a, b, s: float, grid=None, moment_tol: float = 1e-9) -> float:
    """Grid maximum of ``|a(xi) - b(xi)| / |xi|**s``."""
    if not s > 0:
        raise ValueError("s must be positive")
    xi = _grid_of(a, b, grid)
    _check_moments(a, b, s, moment_tol)
    diff = np.abs(a.at(xi) - b.at(xi))
    return float(np.max(diff / np.abs(xi) ** s))


def dilation_scaling_check(a, b, s: float, scale_factor: float, grid=None) -> tuple[float, float]:
    """``(sup |a(c xi) - b(c xi)| / |xi|**s, |c|**s d_s(a, b))``.

    The left side is taken over the grid divided by ``c`` so that both sides
    see the same frequencies.
    """
    if scale_factor == 0:
        raise ValueError("scale factor must be nonzero")
    xi = _grid_of(a, b, grid)
    c = scale_factor
    shrunk = xi / c
    stretched = np.asarray(c * shrunk)

    def value(obj):
        return obj.values if isinstance(obj, EmpiricalCF) else obj.at(stretched)

    lhs = float(np.max(np.abs(value(a) - value(b)) / np.abs(shrunk) ** s))
    rhs = abs(c) ** s * fourier_distance(a, b, s, xi)
    return lhs, rhs


def graph_distance(masses, F: Sequence, G: Sequence, s: float, grid=None, min_mass: float = 1e-12) -> float:
    """Mass-weighted sum of per-vertex Fourier distances."""
    rho = np.asarray(masses, dtype=float)
    if len(F) != rho.size or len(G) != rho.size:
        raise ValueError("need one characteristic function per vertex on each side")
    if np.any(rho < 0):
        raise ValueError("masses must be non-negative")
    total = 0.0
    for r, f, g in zip(rho, F, G):
        if r < min_mass:
            continue
        total += r * fourier_distance(f, g, s, grid)
    return total


def l2_histogram_norm(h: Histogram) -> float:
    return float(np.sqrt(np.sum(h.density**2 * h.widths)))


def l2_norm_bound(norm0: float, law, t: float, rate: float = 1.0) -> float:
    """Exponential envelope for the L2 norm, using the smaller of ``<p^-1/2>`` and ``<q^-1/2>``.

    ``rate`` is the interaction frequency (``1/eps`` in scaled time).
    """
    inv = []
    for c in (law.p, law.q):
        if c.support_min() <= 0:
            inv.append(math.inf)
        else:
            inv.append(c.expect(lambda x: x**-0.5))
    return norm0 * math.exp((min(inv) - 1.0) * rate * t)
