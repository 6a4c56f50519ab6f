"""Statistical moments: closed forms and fixed-step RK4 integration."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kinetics import InteractionLaw, spectral_S

MAX_ORDER = 8
RHO_FLOOR = 1e-12


@dataclass(frozen=True)
class MomentSeries:
    """``values[j, n]`` is the n-th moment at ``times[j]``."""

    times: np.ndarray
    values: np.ndarray

    def order(self, n: int) -> np.ndarray:
        return self.values[:, n]

    def at(self, t: float) -> np.ndarray:
        j = int(np.argmin(np.abs(self.times - t)))
        return self.values[j]


def rk4(rhs: Callable[[np.ndarray], np.ndarray], y0, T: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Classic RK4 with ``round(T/dt)`` equal steps (the last one adjusted to land on T)."""
    n = max(1, int(round(T / dt)))
    h = T / n
    y = np.array(y0, dtype=float)
    out = np.empty((n + 1, y.size))
    out[0] = y
    for k in range(n):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = y
    return np.linspace(0.0, T, n + 1), out


def mean_closed_form(M10: float, law: InteractionLaw, t):
    return M10 * np.exp((law.mean_sum - 1.0) * np.asarray(t, dtype=float))


def stationary_energy(law: InteractionLaw, M1: float) -> float:
    if law.energy_sum >= 1.0:
        raise ValueError("stationary energy needs <p^2+q^2> < 1")
    return 2.0 * law.cross * M1 * M1 / (1.0 - law.energy_sum)


def energy_bound(M10: float, M20: float, law: InteractionLaw) -> float:
    """Upper bound on the energy for all times when the mean is conserved."""
    return M20 + stationary_energy(law, M10)


def energy_closed_form(M10: float, M20: float, law: InteractionLaw, t):
    if abs(law.energy_sum - 1.0) <= 1e-15:
        raise ValueError("<p^2+q^2> = 1: the energy is not given by the dissipative formula")
    decay = np.exp((law.energy_sum - 1.0) * np.asarray(t, dtype=float))
    return decay * M20 + 2.0 * (1.0 - decay) * law.cross / (1.0 - law.energy_sum) * M10 * M10


def steady_third_bound(law: InteractionLaw, M1_inf: float) -> float:
    if not law.cubic_sum < 1.0:
        raise ValueError(f"<p^3+q^3> = {law.cubic_sum:.12g} >= 1: third moment is not bounded")
    m2 = stationary_energy(law, M1_inf)
    return 3.0 * law.cubic_cross / (1.0 - law.cubic_sum) * m2**1.5


def _moment_rhs(law: InteractionLaw, order: int):
    growth = np.array([spectral_S(law, n) for n in range(order + 1)])
    growth[0] = 0.0
    mixed = {
        (n, k): math.comb(n, k) * law.mixed_moment(k, n - k)
        for n in range(2, order + 1)
        for k in range(1, n)
    }

    def rhs(m):
        d = growth * m
        for (n, k), c in mixed.items():
            d[n] += c * m[k] * m[n - k]
        return d

    return rhs, growth


def integrate_moment_system(law: InteractionLaw, initial, T: float, dt_ode: float = 1e-3) -> MomentSeries:
    """Integrate the closed hierarchy for ``M_0 .. M_n`` with ``M_0`` pinned to one."""
    m0 = np.asarray(initial, dtype=float)
    order = m0.size - 1
    if order < 1 or order > MAX_ORDER:
        raise ValueError(f"moment order must lie in [1, {MAX_ORDER}]")
    if abs(m0[0] - 1.0) > 1e-14:
        raise ValueError("M_0 must be 1")
    rhs, growth = _moment_rhs(law, order)
    if dt_ode * np.max(np.abs(growth)) > 0.5:
        raise ValueError(f"dt_ode={dt_ode:g} too large for growth rate {np.max(np.abs(growth)):.4g}")
    times, values = rk4(rhs, m0, T, dt_ode)
    return MomentSeries(times, values)


# --------------------------------------------------------------------------
# Graph systems


def graph_moment_systems(graph, rho0, M1_0, M2_0, T: float, dt_ode: float = 1e-3) -> list[MomentSeries]:
    """Mass, mean and energy per vertex.

    The unknowns are ``rho_i``, the momentum ``rho_i M_1i`` and ``rho_i M_2i``;
    means are recovered by division wherever the mass is positive.
    """
    N = graph.N
    P = np.asarray(graph.P)
    chi = graph.chi
    rho0 = np.asarray(rho0, dtype=float)
    if np.any(rho0 < 0):
        raise ValueError("initial masses must be non-negative")
    mean_sums = np.array([law.mean_sum for law in graph.laws])
    energy_sums = np.array([law.energy_sum for law in graph.laws])
    cross = np.array([law.cross for law in graph.laws])

    def rates(rho):
        return graph.interaction_rates(np.maximum(rho, RHO_FLOOR))

    rate_bound = chi * 2 + np.max(rates(rho0) * np.maximum(rho0, RHO_FLOOR)) * 2
    if dt_ode * rate_bound > 0.5:
        raise ValueError(f"dt_ode={dt_ode:g} too large for the graph rates")

    def rhs(y):
        rho, mom, en = y[:N], y[N : 2 * N], y[2 * N :]
        mu_rho = rates(rho) * rho
        safe = np.maximum(rho, RHO_FLOOR)
        m1 = mom / safe
        d_rho = chi * (P @ rho - rho)
        d_mom = chi * (P @ mom - mom) + mu_rho * (mean_sums - 1.0) * mom
        d_en = chi * (P @ en - en) + mu_rho * ((energy_sums - 1.0) * en + 2.0 * cross * rho * m1 * m1)
        return np.concatenate([d_rho, d_mom, d_en])

    y0 = np.concatenate([rho0, rho0 * np.asarray(M1_0, dtype=float), rho0 * np.asarray(M2_0, dtype=float)])
    times, ys = rk4(rhs, y0, T, dt_ode)
    out = []
    for i in range(N):
        rho = ys[:, i]
        with np.errstate(invalid="ignore", divide="ignore"):
            m1 = np.where(rho > RHO_FLOOR, ys[:, N + i] / rho, np.nan)
            m2 = np.where(rho > RHO_FLOOR, ys[:, 2 * N + i] / rho, np.nan)
        out.append(MomentSeries(times, np.column_stack([rho, m1, m2])))
    return out
