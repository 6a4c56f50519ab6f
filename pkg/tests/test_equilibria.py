from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from kinetic_mc.equilibria import (
    ConservedEnergyFatTail,
    DiracAtom,
    Gaussian,
    GraphTwoVertexPair,
    InverseGamma,
    PdfUndefined,
    SampleUndefined,
    TransportSelfSimilar,
    advection_diffusion_equilibrium,
    gaussian_fixed_point_residual,
    graph_two_vertex_solution,
    pdf,
    quadrature_moment,
    sample,
    tail_exponent,
)
from kinetic_mc.sampling import RngStream, UniformInterval

LAM, SIGMA_SQ = 3.5, 6.0


def test_inverse_gamma_parameters_and_mean():
    d = advection_diffusion_equilibrium(LAM, SIGMA_SQ, 1.0)
    assert (d.shape, d.scale) == pytest.approx((13 / 6, 7 / 6), rel=1e-15)
    assert np.all(pdf(d, np.array([-1.0, 0.0])) == 0.0)
    assert quadrature_moment(d, 0) == pytest.approx(1.0, abs=1e-8)
    assert quadrature_moment(d, 1) == pytest.approx(1.0, abs=1e-6)
    assert d.mean() == pytest.approx(1.0, rel=1e-15)


@pytest.mark.parametrize("m10", [0.3, 1.0, 4.0])
def test_inverse_gamma_normalizing_constant(m10):
    d = advection_diffusion_equilibrium(LAM, SIGMA_SQ, m10)
    r = 2 * LAM / SIGMA_SQ
    explicit = (1 + r) * math.log(r * m10) - math.lgamma(1 + r)
    assert d.log_norm == pytest.approx(explicit, abs=1e-10)


def test_fokker_planck_flux_vanishes():
    m10 = 1.0
    d = advection_diffusion_equilibrium(LAM, SIGMA_SQ, m10)
    a, theta = d.shape, d.scale
    v = np.geomspace(0.05, 50.0, 400)
    g = d.pdf(v)
    dg = g * (-(a + 1) / v + theta / v**2)
    drift = LAM * (m10 - v) * g
    flux = drift - 0.5 * SIGMA_SQ * (2 * v * g + v * v * dg)
    assert np.max(np.abs(flux) / (np.abs(drift) + 1e-300)) <= 1e-8


def test_reflected_and_zero_mean_equilibria():
    d = advection_diffusion_equilibrium(LAM, SIGMA_SQ, -2.0)
    assert d.reflected
    assert np.all(d.pdf(np.array([0.5, 3.0])) == 0.0)
    assert quadrature_moment(d, 1) == pytest.approx(-2.0, abs=1e-6)
    assert d.cdf(np.array([0.0]))[0] == pytest.approx(1.0)
    assert isinstance(advection_diffusion_equilibrium(LAM, SIGMA_SQ, 0.0), DiracAtom)


def test_inverse_gamma_cdf_matches_quadrature():
    d = InverseGamma(13 / 6, 7 / 6)
    for v in (0.3, 1.0, 5.0):
        val, _ = integrate.quad(lambda x: float(d.pdf(x)), 0, v, epsabs=1e-13)
        assert d.cdf(v) == pytest.approx(val, abs=1e-10)


def test_tail_exponents():
    assert tail_exponent(advection_diffusion_equilibrium(LAM, SIGMA_SQ, 1.0)) == pytest.approx(13 / 6)
    assert tail_exponent(Gaussian(0, 1)) is None
    assert tail_exponent(ConservedEnergyFatTail(1.0, 1.0, 1.0)) == pytest.approx(3.0)


@given(lam=st.floats(0.1, 10), frac=st.floats(0.01, 0.99))
def test_tail_exponent_above_two(lam, frac):
    sigma = math.sqrt(frac * 2 * lam)
    assert tail_exponent(ConservedEnergyFatTail(lam, sigma, 1.0)) > 2
    assert tail_exponent(advection_diffusion_equilibrium(lam, sigma**2, 1.0)) > 2


def test_gaussian_at_origin():
    assert Gaussian(0.0, 2.0).pdf(0.0) == pytest.approx(1 / math.sqrt(4 * math.pi), rel=1e-15)
    assert quadrature_moment(Gaussian(0.0, 2.0), 2) == pytest.approx(2.0, abs=1e-8)


def test_dirac_has_no_density():
    with pytest.raises(PdfUndefined):
        pdf(DiracAtom(1.0), 0.0)
    assert np.all(sample(DiracAtom(1.5), RngStream(0, (0,)), 10) == 1.5)


@pytest.mark.parametrize("t", [0.0, 0.5, 2.0])
def test_transport_solution(t):
    d = TransportSelfSimilar(UniformInterval(-1.0, 3.0), 1.0, 1.0, t)
    lo, hi = 1 - 2 * math.exp(-t), 1 + 2 * math.exp(-t)
    inside = np.linspace(lo, hi, 11)[1:-1]
    assert np.allclose(d.pdf(inside), math.exp(t) / 4, rtol=1e-13)
    assert np.all(d.pdf(np.array([lo - 1e-6, hi + 1e-6])) == 0.0)
    mass, _ = integrate.quad(lambda v: float(d.pdf(v)), lo, hi)
    assert mass == pytest.approx(1.0, abs=1e-8)
    assert d.mean() == pytest.approx(1.0, abs=1e-15)


def test_transport_solution_solves_advection():
    # d/dt f = -d/dv (lam (M10 - v) f) for a smooth initial law.
    lam, m10, t, h = 1.0, 0.5, 0.7, 1e-4
    f0 = Gaussian(1.5, 0.4)
    v = np.linspace(-1, 3, 41)

    def f(tt, vv):
        return TransportSelfSimilar(f0, lam, m10, tt).pdf(vv)

    dt = (f(t + h, v) - f(t - h, v)) / (2 * h)
    flux = lambda vv: lam * (m10 - vv) * f(t, vv)
    dv = (flux(v + h) - flux(v - h)) / (2 * h)
    assert np.max(np.abs(dt + dv)) <= 1e-6


def test_transport_samples_are_contracted_draws():
    d = TransportSelfSimilar(UniformInterval(-1.0, 3.0), 1.0, 1.0, 2.0)
    x = UniformInterval(-1.0, 3.0).sample(RngStream(4, (0,)), 100)
    y = sample(d, RngStream(4, (0,)), 100)
    assert np.allclose(y, 1.0 + math.exp(-2.0) * (x - 1.0), rtol=0, atol=1e-15)


def test_inverse_gamma_sample_mean():
    d = InverseGamma(3.5, 2.5)
    x = sample(d, RngStream(8, (0,)), 200_000)
    assert abs(x.mean() - 1.0) <= 5 * math.sqrt(d.variance() / x.size)


def test_conserved_energy_fat_tail():
    d = ConservedEnergyFatTail(1.0, 1.0, 2.0)
    assert quadrature_moment(d, 0) == pytest.approx(1.0, abs=1e-8)
    assert quadrature_moment(d, 2) == pytest.approx(2.0, abs=1e-6)
    v = np.linspace(0.1, 20, 50)
    assert np.array_equal(d.pdf(v), d.pdf(-v))
    assert d.cdf(0.0) == pytest.approx(0.5, abs=1e-15)
    mass, _ = integrate.quad(lambda x: float(d.pdf(x)), -np.inf, 1.3)
    assert d.cdf(1.3) == pytest.approx(mass, abs=1e-9)


def test_conserved_energy_fat_tail_shape():
    lam, sigma, m20 = 2.0, 1.2, 0.8
    d = ConservedEnergyFatTail(lam, sigma, m20)
    v = np.linspace(-5, 5, 21)
    expected_log = -(1 + lam / sigma**2) * np.log(0.5 * sigma**2 * v * v + (lam - 0.5 * sigma**2) * m20)
    diff = np.log(d.pdf(v)) - expected_log
    assert np.ptp(diff) <= 1e-12


@pytest.mark.parametrize("lam,eps", [(1.0, 0.1), (1.0, 0.01), (2.0, 0.001)])
def test_gaussian_fixed_point(lam, eps):
    grid = np.linspace(-5, 5, 1001)
    assert gaussian_fixed_point_residual(lam, eps, 1.5, grid) <= 1e-12
    assert gaussian_fixed_point_residual(lam, eps, 0.0, grid) == 0.0
    assert gaussian_fixed_point_residual(lam, eps, 1.5, grid, q_shift=1e-3) > 1e-8


def test_gaussian_fixed_point_rejects_large_eps():
    with pytest.raises(ValueError):
        gaussian_fixed_point_residual(1.0, 2.5, 1.0, np.ones(3))


class _Density:
    def __init__(self, fn):
        self.pdf = fn


def two_vertex(**kw):
    params = dict(rho10=0.6, M110=1.0, lam1=LAM, sigma1_sq=SIGMA_SQ, beta=0.3, g20=Gaussian(0.0, 0.25))
    params.update(kw)
    return GraphTwoVertexPair(**params)


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_two_vertex_masses(t):
    pair = two_vertex()
    m1, _ = integrate.quad(lambda v: float(pair.g1(v, t)), 0, np.inf, epsabs=1e-12, limit=500)
    m2 = quadrature_moment(_Density(lambda v: pair.g2(v, t)), 0)
    assert m1 == pytest.approx(0.6 * math.exp(-0.3 * t), abs=1e-8)
    assert m2 == pytest.approx(1 - 0.6 * math.exp(-0.3 * t), abs=1e-8)
    assert pair.mass1(t) + pair.mass2(t) == pytest.approx(1.0, abs=1e-15)


def test_two_vertex_limits():
    pair = two_vertex()
    v = np.linspace(-2, 5, 30)
    g1, g2 = graph_two_vertex_solution(pair, v, 0.0)
    assert np.allclose(g2, 0.4 * Gaussian(0.0, 0.25).pdf(v), rtol=1e-15, atol=0)
    assert pair.mass1(0.0) == pytest.approx(0.6)
    g1, _ = graph_two_vertex_solution(pair, v, 200.0)
    assert np.max(g1) < 1e-20
    assert pair.mass2(200.0) == pytest.approx(1.0, abs=1e-20)
    assert pair.vertex1_law.mean() == pytest.approx(1.0)


def test_two_vertex_rejections():
    with pytest.raises(ValueError):
        two_vertex(M110=-1.0)
    with pytest.raises(ValueError):
        two_vertex(beta=1.0)


def test_sub_probability_cannot_be_sampled():
    class Partial:
        def mass(self, t=None):
            return 0.4

        def sample(self, stream, n):
            return np.zeros(n)

    with pytest.raises(SampleUndefined):
        sample(Partial(), RngStream(0, (0,)), 3)
