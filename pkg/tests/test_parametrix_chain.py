import math

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm, t as student

from conftest import benchmark_set, constant_set
from paramstab.coefficients import CoefficientSet
from paramstab.errors import InvalidArgument, Unsupported
from paramstab.parametrix_chain import (DIRAC, ChainGrid, ChainModel, InnovationLaw, chain_density_parametrix,
                                        discrete_convolve, frozen_chain_density, generator_apply, kernel_Hh,
                                        nfold_density, one_step_density)

POLY = InnovationLaw("poly-tail", 12)


def test_law_validation():
    with pytest.raises(InvalidArgument):
        InnovationLaw("cauchy")
    with pytest.raises(InvalidArgument):
        InnovationLaw("poly-tail", 8)
    with pytest.raises(Unsupported):
        ChainModel(constant_set(d=2), 1.0, 4, POLY)
    with pytest.raises(InvalidArgument):
        ChainModel(constant_set(), 1.0, 0)
    assert POLY.label == "poly-tail M=12"


def test_poly_tail_is_unit_variance_student():
    z = np.linspace(-30, 30, 61)
    ref = student.pdf(z, df=11, scale=math.sqrt(9.0 / 11.0))
    assert np.allclose(POLY.pdf(z[:, None]), ref, rtol=1e-12, atol=0)
    var, _ = integrate.quad(lambda u: u * u * POLY.pdf(np.array([[u]]))[0], -np.inf, np.inf)
    assert var == pytest.approx(1.0, rel=1e-9)
    assert math.isfinite(POLY.tail_constant())


@pytest.mark.parametrize("law", [InnovationLaw(), POLY])
def test_quadrature_moments(law):
    nodes, w = law.quadrature(1)
    assert np.sum(w) == pytest.approx(1.0, abs=1e-12)
    assert np.dot(w, nodes[:, 0]) == pytest.approx(0.0, abs=1e-12)
    assert np.dot(w, nodes[:, 0] ** 2) == pytest.approx(1.0, abs=1e-10)


def test_one_step_gaussian_peak():
    m = ChainModel(constant_set(0.0, 1.0), 1.0, 100)
    assert float(one_step_density(m, 0, 0.3, 0.3)) == pytest.approx(1 / math.sqrt(2 * math.pi * 0.01), rel=1e-13)


@pytest.mark.parametrize("law", [InnovationLaw(), POLY])
def test_one_step_mass(law, bench):
    m = ChainModel(bench, 1.0, 10, law)
    mass, _ = integrate.quad(lambda y: float(one_step_density(m, 3, 0.4, y)), -np.inf, np.inf,
                             epsabs=1e-12, epsrel=1e-12, limit=200)
    assert mass == pytest.approx(1.0, abs=1e-8)


def test_one_step_poly_peak():
    m = ChainModel(constant_set(0.0, 1.0), 1.0, 100, POLY)
    expect = float(POLY.pdf(np.zeros((1, 1)))[0]) / math.sqrt(0.01)
    assert float(one_step_density(m, 0, 0.0, 0.0)) == pytest.approx(expect, rel=1e-13)


def test_frozen_chain_gaussian_is_sum_of_steps():
    m = ChainModel(constant_set(0.0, 1.0), 2.0, 8)
    ys = np.linspace(-4, 4, 9)
    assert np.allclose(frozen_chain_density(m, 0, 8, 0.5, ys), norm.pdf(ys, 0.5, math.sqrt(2.0)), rtol=1e-13)
    assert frozen_chain_density(m, 3, 3, 0.0, 0.0) is DIRAC


@pytest.mark.parametrize("law", [InnovationLaw(), POLY])
def test_frozen_single_step_is_driftless_frozen_step(law, bench):
    m = ChainModel(bench, 1.0, 10, law)
    ys = np.linspace(-1, 1, 7)
    a = frozen_chain_density(m, 2, 3, 0.1, ys)
    b = one_step_density(m, 2, 0.1, ys, frozen_at=ys, drift=False)
    assert np.allclose(a, b, rtol=1e-13, atol=0)


def test_poly_two_fold_matches_direct_convolution():
    m = ChainModel(constant_set(0.0, 1.0), 1.0, 10, POLY)
    h = m.h
    f = lambda v: float(POLY.pdf(np.array([[v]]))[0])
    for y in np.linspace(-1.5, 1.5, 7):
        u = y / math.sqrt(h)
        conv, _ = integrate.quad(lambda w: f(w) * f(u - w), -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12, limit=400)
        got = float(frozen_chain_density(m, 0, 2, 0.0, y)) * math.sqrt(h)
        assert got == pytest.approx(conv, abs=1e-6)


def test_nfold_density_mass():
    u = np.linspace(-60, 60, 4801)
    for n in (1, 3, 7):
        assert integrate.simpson(nfold_density(POLY, n, u), x=u) == pytest.approx(1.0, abs=1e-6)


def test_poly_time_inhomogeneous_rejected():
    cs = CoefficientSet(1, lambda t, x: 0 * np.asarray(x), lambda t, x: np.full(np.asarray(x).shape + (1,), 1.0 + t),
                        time_homogeneous=False, Lambda=4.0)
    m = ChainModel(cs, 1.0, 4, POLY)
    with pytest.raises(Unsupported):
        frozen_chain_density(m, 0, 2, 0.0, 0.0)


@pytest.mark.parametrize("law", [InnovationLaw(), POLY])
def test_generator_moments(law, bench):
    m = ChainModel(bench, 1.0, 10, law)
    x = 0.7
    b = float(bench.b(0.0, np.array([[x]]))[0, 0])
    s2 = float(bench.a(0.0, np.array([[x]]))[0, 0, 0])
    assert generator_apply(m, 2, lambda z: z[..., 0], x) == pytest.approx(b, rel=1e-10)
    assert generator_apply(m, 2, lambda z: z[..., 0] ** 2, x) == pytest.approx(2 * x * b + b * b * m.h + s2, abs=1e-8)
    assert abs(generator_apply(m, 2, lambda z: z[..., 0], x, frozen_at=0.2)) <= 1e-10


def test_hh_constant_coefficients_vanish():
    m = ChainModel(constant_set(0.0, 1.2), 1.0, 10)
    ys = np.linspace(-2, 2, 9)
    assert np.all(kernel_Hh(m, 0, 1, 0.0, ys) == 0.0)
    assert np.all(kernel_Hh(m, 2, 7, 0.3, ys) == 0.0)


def test_hh_one_step_closed_form():
    m = ChainModel(constant_set(1.0, 1.0), 1.0, 100)
    h = 0.01
    ys = np.linspace(-0.4, 0.4, 17)
    expect = (norm.pdf(ys, h, math.sqrt(h)) - norm.pdf(ys, 0.0, math.sqrt(h))) / h
    assert np.allclose(kernel_Hh(m, 0, 1, 0.0, ys), expect, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("lag", [1, 4])
def test_hh_integrates_to_zero(lag):
    # mass is conserved when sigma is constant; a y-dependent freeze point
    # leaves an O(1) residue of order d/dy a
    from paramstab.catalog import make_profile
    from paramstab.coefficients import from_profiles
    cs = from_profiles(1, make_profile("cos"), make_profile("constant", value=1.0), K1=1.0, K2=1.0, Lambda=1.0)
    m = ChainModel(cs, 1.0, 10)
    y = np.linspace(-8, 8, 3201)
    assert abs(integrate.simpson(kernel_Hh(m, 0, lag, 0.2, y), x=y)) <= 1e-6


def test_hh_closed_matches_quadrature(bench):
    m = ChainModel(bench, 1.0, 10)
    ys = np.linspace(-1.5, 1.5, 11)
    a = kernel_Hh(m, 1, 5, 0.3, ys, method="closed")
    b = kernel_Hh(m, 1, 5, 0.3, ys, method="quadrature")
    assert np.allclose(a, b, rtol=1e-8, atol=1e-10)
    with pytest.raises(InvalidArgument):
        kernel_Hh(ChainModel(bench, 1.0, 10, POLY), 1, 5, 0.3, ys, method="closed")


def test_convolve_with_zero_order_identity(bench):
    m = ChainModel(bench, 1.0, 10)
    dirac = lambda i, k, x, zs: DIRAC if k == i else np.zeros(len(zs))
    g = lambda k, j, zs, y: kernel_Hh(m, k, j, zs, y)
    # only the collapsed k = i term survives
    got = discrete_convolve(m, dirac, g, 0, 3, 0.1, 0.4)
    assert got == pytest.approx(m.h * float(kernel_Hh(m, 0, 3, 0.1, 0.4)), rel=1e-14)


@pytest.mark.parametrize("law", [InnovationLaw(), POLY])
def test_one_step_telescoping(law, bench):
    m = ChainModel(bench, 1.0, 10, law)
    rng = np.random.default_rng(5)
    for x, y in rng.uniform(-1, 1, size=(10, 2)):
        pt = float(frozen_chain_density(m, 4, 5, x, y))
        corr = discrete_convolve(m, lambda i, k, xx, zs: frozen_chain_density(m, i, k, xx, zs),
                                 lambda k, j, zs, yy: kernel_Hh(m, k, j, zs, yy), 4, 5, x, y)
        assert abs(pt + corr - float(one_step_density(m, 4, x, y))) <= 1e-12


def test_chain_series_constant_coefficients():
    m = ChainModel(constant_set(0.0, 1.3), 1.0, 6)
    ys = np.linspace(-3, 3, 13)
    res = chain_density_parametrix(m, 0, 6, 0.2, ys)
    assert np.max(np.abs(res.value - norm.pdf(ys, 0.2, 1.3))) <= 1e-10
    assert res.terms.shape[0] == 7


@pytest.mark.parametrize("N", [5, 20])
def test_chain_series_constant_drift(N):
    m = ChainModel(constant_set(0.5, 1.0), 1.0, N)
    res = chain_density_parametrix(m, 0, N, 0.0, [0.5])
    assert abs(res.value[0] - norm.pdf(0.0)) / norm.pdf(0.0) <= 1e-2


def test_chain_series_subinterval_and_errors(bench):
    m = ChainModel(bench, 1.0, 10)
    res = chain_density_parametrix(m, 3, 5, 0.0, np.linspace(-2, 2, 5))
    assert abs(res.mass0 - 1.0) <= 1e-3
    with pytest.raises(InvalidArgument):
        chain_density_parametrix(m, 5, 5, 0.0, 0.0)
    with pytest.raises(InvalidArgument):
        chain_density_parametrix(m, 0, 11, 0.0, 0.0)


def test_chain_grid_defaults():
    g = ChainGrid()
    assert g.per_axis(1) == 513 and g.per_axis(2) == 41 and g.per_axis(1, "poly-tail") == 257
