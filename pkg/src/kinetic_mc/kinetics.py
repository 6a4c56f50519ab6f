"""Linear symmetric interaction laws and their small-parameter scalings.

A law is a pair of independent non-negative coefficients ``(p, q)``; a binary
encounter maps ``(v, w)`` to ``(p v + q w, p w + q v)``.  The scaling regimes
below turn a handful of physical constants into an ``eps``-dependent law whose
interactions become nearly trivial as ``eps`` shrinks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

from .sampling import AffineOfBase, Deterministic, RandomCoefficient

# Relative slack used when the admissibility flags compare against 1.
FLAG_TOL = 1e-12


class EpsilonTooLarge(ValueError):
    def __init__(self, eps: float, eps_max: float):
        super().__init__(f"eps={eps:g} is not admissible: it must stay strictly below eps_max={eps_max:.12g}")
        self.eps = eps
        self.eps_max = eps_max


class EtaMomentsInvalid(ValueError):
    pass


class EtaSupportInvalid(ValueError):
    pass


def interact(v, v_star, p_draw, q_draw):
    return p_draw * v + q_draw * v_star


@dataclass(frozen=True)
class InteractionLaw:
    """Independent coefficients ``p`` and ``q``, both supported on ``[0, inf)``."""

    p: RandomCoefficient
    q: RandomCoefficient

    def __post_init__(self):
        for name in ("p", "q"):
            lo = getattr(self, name).support_min()
            if lo < 0:
                raise ValueError(f"coefficient {name} must be non-negative, support starts at {lo}")

    def mixed_moment(self, k: int, m: int) -> float:
        # p and q are independent in every law this package builds.
        return self.p.raw_moment(k) * self.q.raw_moment(m)

    @cached_property
    def mean_sum(self) -> float:
        return self.p.mean() + self.q.mean()

    @cached_property
    def energy_sum(self) -> float:
        return self.p.raw_moment(2) + self.q.raw_moment(2)

    @cached_property
    def cubic_sum(self) -> float:
        return self.p.raw_moment(3) + self.q.raw_moment(3)

    @cached_property
    def cross(self) -> float:
        """``<p q>``."""
        return self.mixed_moment(1, 1)

    @cached_property
    def cubic_cross(self) -> float:
        """``<p q (p + q)>``."""
        return self.mixed_moment(2, 1) + self.mixed_moment(1, 2)


@dataclass(frozen=True)
class AdmissibilityReport:
    mean_sum: float
    energy_sum: float
    cubic_sum: float
    eps_max: float | None = None
    eta_min_required: float | None = None
    mean_conserving: bool = field(init=False)
    energy_dissipative: bool = field(init=False)
    cubic_contractive: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "mean_conserving", abs(self.mean_sum - 1.0) <= FLAG_TOL)
        object.__setattr__(self, "energy_dissipative", self.energy_sum < 1.0 - FLAG_TOL)
        object.__setattr__(self, "cubic_contractive", self.cubic_sum < 1.0 - FLAG_TOL)

    def as_dict(self) -> dict:
        return {
            "mean_sum": self.mean_sum,
            "energy_sum": self.energy_sum,
            "cubic_sum": self.cubic_sum,
            "eps_max": self.eps_max,
            "eta_min_required": self.eta_min_required,
            "mean_conserving": self.mean_conserving,
            "energy_dissipative": self.energy_dissipative,
            "cubic_contractive": self.cubic_contractive,
        }


def law_statistics(law: InteractionLaw, eps_max=None, eta_min_required=None) -> AdmissibilityReport:
    return AdmissibilityReport(law.mean_sum, law.energy_sum, law.cubic_sum, eps_max, eta_min_required)


# --------------------------------------------------------------------------
# Scaling regimes


def _check_eta(eta: RandomCoefficient, lower_bound: float) -> None:
    if abs(eta.mean()) > 1e-10 or abs(eta.raw_moment(2) - 1.0) > 1e-10:
        raise EtaMomentsInvalid(
            f"noise must have zero mean and unit variance, got mean={eta.mean():.3g}, "
            f"second moment={eta.raw_moment(2):.12g}"
        )
    if not math.isfinite(eta.abs_moment(3)):
        raise EtaMomentsInvalid("noise must have a finite third absolute moment")
    if eta.support_min() < lower_bound - 1e-12:
        raise EtaSupportInvalid(
            f"noise support starts at {eta.support_min():.12g}, below the required {lower_bound:.12g}"
        )


def _diffusive_eta_bound(lam: float, sigma_sq: float) -> float:
    # Smallest noise value that keeps p_eps >= 0 for every admissible eps.
    if sigma_sq == 0:
        return -math.inf
    r = sigma_sq / (2.0 * lam)
    return -math.sqrt(r / (2.0 * (1.0 - r)))


@dataclass(frozen=True)
class AdvectionDiffusion:
    """``q = eps*lam``, ``p = 1 - eps*lam + sqrt(eps)*sigma*eta``."""

    lam: float
    sigma_sq: float
    eta: RandomCoefficient

    def __post_init__(self):
        if not (self.lam > 0 and self.sigma_sq > 0):
            raise ValueError("lam and sigma_sq must be positive")
        if not self.sigma_sq < 2 * self.lam:
            raise ValueError(f"need sigma_sq < 2*lam, got sigma_sq={self.sigma_sq}, lam={self.lam}")

    def eps_max(self) -> float:
        return (1.0 - self.sigma_sq / (2.0 * self.lam)) / self.lam

    def eta_min_required(self, eps: float | None = None) -> float:
        return _diffusive_eta_bound(self.lam, self.sigma_sq)

    def coefficients(self, eps: float) -> tuple[RandomCoefficient, RandomCoefficient]:
        p = AffineOfBase(1.0 - eps * self.lam, math.sqrt(eps * self.sigma_sq), self.eta)
        return p, Deterministic(eps * self.lam)


@dataclass(frozen=True)
class AdvectionDominated:
    """``q = eps*lam``, ``p = 1 - eps*lam + eps**((1+delta)/2)*sigma*eta``."""

    lam: float
    sigma: float
    delta: float
    eta: RandomCoefficient

    def __post_init__(self):
        if not (self.lam > 0 and self.sigma > 0 and self.delta > 0):
            raise ValueError("lam, sigma and delta must be positive")
        if not self.sigma**2 > 2 * self.lam * (1 - self.lam):
            raise ValueError("need sigma**2 > 2*lam*(1 - lam)")

    @property
    def sigma_sq(self) -> float:
        return self.sigma**2

    def eps_max(self) -> float:
        base = 2 * self.lam / (2 * self.lam**2 + self.sigma_sq)
        return base ** (1.0 / min(self.delta, 1.0))

    def eta_min_required(self, eps: float) -> float:
        return -(1.0 - eps * self.lam) / (eps ** ((1 + self.delta) / 2) * self.sigma)

    def coefficients(self, eps):
        p = AffineOfBase(1.0 - eps * self.lam, eps ** ((1 + self.delta) / 2) * self.sigma, self.eta)
        return p, Deterministic(eps * self.lam)


@dataclass(frozen=True)
class ConservedEnergy:
    """``p = 1 - eps*lam + sqrt(eps)*sigma*eta``, deterministic ``q`` fixing ``<p^2 + q^2> = 1``."""

    lam: float
    sigma: float
    eta: RandomCoefficient | None = None

    def __post_init__(self):
        if self.sigma > 0 and self.eta is None:
            raise ValueError("a noisy conserved-energy scaling needs a noise law eta")
        if not (self.lam > 0 and self.sigma >= 0):
            raise ValueError("lam must be positive and sigma non-negative")
        if not self.sigma**2 < 2 * self.lam:
            raise ValueError("need sigma**2 < 2*lam")

    @property
    def sigma_sq(self) -> float:
        return self.sigma**2

    def eps_max(self) -> float:
        return (1.0 - self.sigma_sq / (2.0 * self.lam)) / self.lam

    def eta_min_required(self, eps: float | None = None) -> float:
        return _diffusive_eta_bound(self.lam, self.sigma_sq)

    def coefficients(self, eps):
        if self.sigma == 0:
            p = Deterministic(1.0 - eps * self.lam)
        else:
            p = AffineOfBase(1.0 - eps * self.lam, math.sqrt(eps) * self.sigma, self.eta)
        q = math.sqrt(2 * self.lam * eps) * math.sqrt(1 - self.sigma_sq / (2 * self.lam) - eps * self.lam / 2)
        return p, Deterministic(q)


ScalingRegime = AdvectionDiffusion | AdvectionDominated | ConservedEnergy


def materialize(regime: ScalingRegime, eps: float) -> tuple[InteractionLaw, AdmissibilityReport]:
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    eps_max = regime.eps_max()
    if not eps < eps_max:
        raise EpsilonTooLarge(eps, eps_max)
    eta_min = regime.eta_min_required(eps)
    if regime.sigma_sq > 0:
        _check_eta(regime.eta, eta_min)
    p, q = regime.coefficients(eps)
    law = InteractionLaw(p, q)
    return law, law_statistics(law, eps_max, eta_min)


# --------------------------------------------------------------------------
# Tail classification


def spectral_S(law: InteractionLaw, s: float) -> float:
    """``<p**s + q**s> - 1``."""
    if s < 0:
        raise ValueError("s must be non-negative")
    return law.p.moment(s) + law.q.moment(s) - 1.0


@dataclass(frozen=True)
class SlimTails:
    s_max: float


@dataclass(frozen=True)
class FatTails:
    s_bar: float
    pareto_n_bar: int
    s_max: float


def classify_tail(law: InteractionLaw, s_max: float = 12.0, grid_step: float = 0.25) -> SlimTails | FatTails:
    """Locate the first zero of S beyond 1, if any, up to ``s_max``.

    S is convex with S(1) = 0 and S(2) < 0 for the laws accepted here, so
    scanning from 2 upwards and bisecting the first sign change finds the
    only candidate root.
    """
    if not s_max > 2:
        raise ValueError("s_max must exceed 2")
    prev_s, prev_val = 2.0, spectral_S(law, 2.0)
    if prev_val >= 0:
        raise ValueError("law must dissipate energy (S(2) < 0)")
    s = prev_s
    while s < s_max:
        s = min(s + grid_step, s_max)
        val = spectral_S(law, s)
        if val >= 0:
            lo, hi = prev_s, s
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if spectral_S(law, mid) < 0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-12:
                    break
            s_bar = 0.5 * (lo + hi)
            return FatTails(s_bar, math.floor(s_bar) + 1, s_max)
        prev_s = s
    return SlimTails(s_max)
