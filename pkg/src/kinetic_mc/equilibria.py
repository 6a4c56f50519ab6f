"""Closed-form limiting densities and exact time-dependent solutions.

Each family exposes ``pdf``, ``cdf``, ``mass`` and, when it is a probability
law, ``sample``.  The log-gamma function comes from scipy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import integrate, special

from .kinetics import ConservedEnergy
from .sampling import RngStream, _generator, draw_inverse_gamma


class PdfUndefined(ValueError):
    pass


class SampleUndefined(ValueError):
    pass


@dataclass(frozen=True)
class InverseGamma:
    """Density ``theta**a / Gamma(a) * v**(-a-1) * exp(-theta/v)`` on ``v > 0``.

    ``reflected`` mirrors the law to ``v < 0``.
    """

    shape: float
    scale: float
    reflected: bool = False

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("inverse gamma parameters must be positive")

    @property
    def log_norm(self) -> float:
        return self.shape * math.log(self.scale) - special.gammaln(self.shape)

    def _pdf_pos(self, v):
        v = np.asarray(v, dtype=float)
        out = np.zeros_like(v)
        pos = v > 0
        w = v[pos]
        out[pos] = np.exp(self.log_norm - (self.shape + 1) * np.log(w) - self.scale / w)
        return out

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        return self._pdf_pos(-v if self.reflected else v)

    def _cdf_pos(self, v):
        v = np.asarray(v, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(v > 0, special.gammaincc(self.shape, self.scale / np.where(v > 0, v, 1.0)), 0.0)

    def cdf(self, v):
        v = np.asarray(v, dtype=float)
        if self.reflected:
            return 1.0 - self._cdf_pos(-v)
        return self._cdf_pos(v)

    def mass(self, t: float | None = None) -> float:
        return 1.0

    def mean(self) -> float:
        if self.shape <= 1:
            return math.inf
        m = self.scale / (self.shape - 1)
        return -m if self.reflected else m

    def variance(self) -> float:
        if self.shape <= 2:
            return math.inf
        return self.scale**2 / ((self.shape - 1) ** 2 * (self.shape - 2))

    def tail_exponent(self) -> float:
        return self.shape

    def sample(self, stream, n):
        draws = draw_inverse_gamma(stream, self.shape, self.scale, n)
        return -draws if self.reflected else draws


@dataclass(frozen=True)
class Gaussian:
    mean_value: float
    variance_value: float

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        var = self.variance_value
        return np.exp(-0.5 * (v - self.mean_value) ** 2 / var) / math.sqrt(2 * math.pi * var)

    def cdf(self, v):
        return special.ndtr((np.asarray(v, dtype=float) - self.mean_value) / math.sqrt(self.variance_value))

    def cf(self, xi):
        xi = np.asarray(xi, dtype=float)
        return np.exp(-1j * xi * self.mean_value - 0.5 * self.variance_value * xi * xi)

    def mass(self, t=None) -> float:
        return 1.0

    def mean(self) -> float:
        return self.mean_value

    def variance(self) -> float:
        return self.variance_value

    def tail_exponent(self):
        return None

    def sample(self, stream, n):
        return self.mean_value + math.sqrt(self.variance_value) * _generator(stream).standard_normal(n)


@dataclass(frozen=True)
class DiracAtom:
    location: float

    def pdf(self, v):
        raise PdfUndefined("a Dirac atom has no density")

    def cdf(self, v):
        return np.where(np.asarray(v, dtype=float) >= self.location, 1.0, 0.0)

    def cf(self, xi):
        return np.exp(-1j * np.asarray(xi, dtype=float) * self.location)

    def mass(self, t=None) -> float:
        return 1.0

    def mean(self) -> float:
        return self.location

    def variance(self) -> float:
        return 0.0

    def tail_exponent(self):
        return None

    def sample(self, stream, n):
        return np.full(n, float(self.location))


@dataclass(frozen=True)
class TransportSelfSimilar:
    """``f0`` contracted towards ``M10`` at rate ``lam``: ``e^{lam t} f0(M10 + e^{lam t}(v - M10))``."""

    f0: Any
    lam: float
    M10: float
    t: float

    @property
    def stretch(self) -> float:
        return math.exp(self.lam * self.t)

    def _pull_back(self, v):
        return self.M10 + self.stretch * (np.asarray(v, dtype=float) - self.M10)

    def pdf(self, v):
        return self.stretch * self.f0.pdf(self._pull_back(v))

    def cdf(self, v):
        return self.f0.cdf(self._pull_back(v))

    def mass(self, t=None) -> float:
        return 1.0

    def mean(self) -> float:
        return self.M10 + (self.f0.mean() - self.M10) / self.stretch

    def tail_exponent(self):
        return None

    def sample(self, stream, n):
        x = np.asarray(self.f0.sample(stream, n), dtype=float)
        return self.M10 + (x - self.M10) / self.stretch


@dataclass(frozen=True)
class ConservedEnergyFatTail:
    """Symmetric density ``C / (sigma^2 v^2 / 2 + (lam - sigma^2/2) M20)^(1 + lam/sigma^2)``.

    This is a Student t law with ``1 + 2 lam / sigma^2`` degrees of freedom,
    scaled to carry energy ``M20``.
    """

    lam: float
    sigma: float
    M20: float

    def __post_init__(self):
        if not (self.lam > 0 and self.sigma > 0 and self.M20 > 0):
            raise ValueError("lam, sigma and M20 must be positive")
        if not self.sigma**2 < 2 * self.lam:
            raise ValueError("need sigma**2 < 2*lam")

    @property
    def power(self) -> float:
        return 1.0 + self.lam / self.sigma**2

    @property
    def dof(self) -> float:
        return 2.0 * self.power - 1.0

    @property
    def _a(self) -> float:
        return 0.5 * self.sigma**2

    @property
    def _b(self) -> float:
        return (self.lam - 0.5 * self.sigma**2) * self.M20

    @property
    def t_scale(self) -> float:
        return math.sqrt(self._b / (self._a * self.dof))

    @property
    def log_norm(self) -> float:
        k = self.power
        return (
            (k - 0.5) * math.log(self._b)
            + 0.5 * math.log(self._a)
            + special.gammaln(k)
            - 0.5 * math.log(math.pi)
            - special.gammaln(k - 0.5)
        )

    def pdf(self, v):
        v = np.asarray(v, dtype=float)
        return np.exp(self.log_norm - self.power * np.log(self._a * v * v + self._b))

    def cdf(self, v):
        return special.stdtr(self.dof, np.asarray(v, dtype=float) / self.t_scale)

    def mass(self, t=None) -> float:
        return 1.0

    def mean(self) -> float:
        return 0.0

    def variance(self) -> float:
        return self.M20

    def tail_exponent(self) -> float:
        return 1.0 + 2.0 * self.lam / self.sigma**2

    def sample(self, stream, n):
        return self.t_scale * _generator(stream).standard_t(self.dof, n)


@dataclass(frozen=True)
class GraphTwoVertexPair:
    """Exact pair ``(g1, g2)`` for the two-vertex graph where vertex 1 drains into vertex 2.

    ``g20`` is a probability law scaled by ``1 - rho10`` for the initial
    content of vertex 2.
    """

    rho10: float
    M110: float
    lam1: float
    sigma1_sq: float
    beta: float
    g20: Any

    def __post_init__(self):
        if not self.M110 > 0:
            raise ValueError("the conserved vertex-1 mean must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not 0 < self.rho10 < 1:
            raise ValueError("rho10 must lie in (0, 1)")
        if not (self.sigma1_sq > 0 and self.sigma1_sq < 2 * self.lam1):
            raise ValueError("need 0 < sigma1_sq < 2*lam1")

    @property
    def profile(self) -> InverseGamma:
        """Unit-mass, unit-mean profile ``h``."""
        r = 2.0 * self.lam1 / self.sigma1_sq
        return InverseGamma(1.0 + r, r)

    @property
    def vertex1_law(self) -> InverseGamma:
        """``h`` rescaled to mean ``M110``."""
        h = self.profile
        return InverseGamma(h.shape, h.scale * self.M110)

    def rho1(self, t):
        return self.rho10 * np.exp(-self.beta * np.asarray(t, dtype=float))

    def g1(self, v, t):
        return self.rho1(t) * self.vertex1_law.pdf(v)

    def g2(self, v, t):
        moved = self.rho10 - self.rho1(t)
        return (1.0 - self.rho10) * self.g20.pdf(v) + moved * self.vertex1_law.pdf(v)

    def cdf1(self, v, t):
        return self.rho1(t) * self.vertex1_law.cdf(v)

    def cdf2(self, v, t):
        moved = self.rho10 - self.rho1(t)
        return (1.0 - self.rho10) * self.g20.cdf(v) + moved * self.vertex1_law.cdf(v)

    def mass1(self, t):
        return float(self.rho1(t))

    def mass2(self, t):
        return 1.0 - float(self.rho1(t))


def graph_two_vertex_solution(params: GraphTwoVertexPair, v, t):
    return params.g1(v, t), params.g2(v, t)


# --------------------------------------------------------------------------
# Constructors and helpers


def advection_diffusion_equilibrium(lam: float, sigma_sq: float, M10: float):
    """Stationary law of the drift-diffusion limit with conserved mean ``M10``."""
    if M10 == 0:
        return DiracAtom(0.0)
    r = 2.0 * lam / sigma_sq
    return InverseGamma(1.0 + r, r * abs(M10), reflected=M10 < 0)


def pdf(d, v):
    return d.pdf(v)


def tail_exponent(d):
    return d.tail_exponent()


def sample(d, stream: RngStream, n: int) -> np.ndarray:
    if abs(d.mass() - 1.0) > 1e-12:
        raise SampleUndefined("only probability laws can be sampled")
    return np.asarray(d.sample(stream, n), dtype=float)


def gaussian_fixed_point_residual(lam: float, eps: float, M20: float, xi_grid, q_shift: float = 0.0) -> float:
    """Max over the grid of ``|G(xi) - G(p xi) G(q xi)|`` with ``G(xi) = exp(-M20 xi^2 / 2)``.

    ``p`` and ``q`` are the deterministic coefficients of the noise-free
    conserved-energy scaling; ``q_shift`` perturbs ``q`` for negative controls.
    """
    regime = ConservedEnergy(lam, 0.0, eta=None)
    if not eps < regime.eps_max():
        raise ValueError(f"eps={eps} not admissible (eps_max={regime.eps_max()})")
    p_law, q_law = regime.coefficients(eps)
    p, q = p_law.mean(), q_law.mean() + q_shift
    xi = np.asarray(xi_grid, dtype=float)

    def g(x):
        return np.exp(-0.5 * M20 * x * x)

    return float(np.max(np.abs(g(xi) - g(p * xi) * g(q * xi))))


def quadrature_moment(d, n: int = 0, tol: float = 1e-12) -> float:
    """``int v^n pdf(v) dv`` by adaptive quadrature in log-coordinates on each half line."""

    def half_line(sign: float) -> float:
        def integrand(u):
            v = sign * math.exp(u)
            return (v**n) * float(d.pdf(v)) * math.exp(u)

        val, _ = integrate.quad(integrand, -60.0, 60.0, epsabs=tol, epsrel=1e-12, limit=1000)
        return val

    return half_line(1.0) + half_line(-1.0)
