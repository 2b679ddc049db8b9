import math

import numpy as np
import pytest
from scipy.stats import norm

from conftest import benchmark_set, constant_set
from paramstab.errors import EvaluationError, InvalidArgument, TruncationFailure
from paramstab.gaussian_core import GaussianRef
from paramstab.parametrix_sde import (ConvolutionScheme, TailBound, density_series, frozen_kernel,
                                      gaussian_upper_audit, graded_time_rule, kernel_audit_grid,
                                      kernel_bound_audit, kernel_H, parametrix_kernel, timespace_convolve,
                                      truncation_order)
from paramstab.special import beta, gamma

COARSE = ConvolutionScheme(time_nodes=16, space_nodes_per_axis=65, materialize_nodes=16)


def test_scheme_validation():
    with pytest.raises(InvalidArgument):
        ConvolutionScheme(time_nodes=4)
    with pytest.raises(InvalidArgument):
        ConvolutionScheme(space_box_halfwidth=3)
    with pytest.raises(InvalidArgument):
        ConvolutionScheme(time_grading=0.5)
    sch = ConvolutionScheme()
    assert sch.grading(0.5) == 4.0
    assert sch.nodes_per_axis(1) == 129 and sch.nodes_per_axis(2) == 65
    assert sch.refined().time_nodes == 64


@pytest.mark.parametrize("grading", [1.0, 2.0, 4.0])
def test_graded_rule_integrates_singularity(grading):
    # int_0^1 (1-u)^{-1/2} u^{-1/2} du = pi
    u, w = graded_time_rule(0.0, 1.0, 64, max(grading, 4.0))
    assert np.all((u > 0) & (u < 1))
    assert float(np.sum(w / np.sqrt(u * (1 - u)))) == pytest.approx(math.pi, rel=1e-4)
    u, w = graded_time_rule(0.0, 2.0, 32, grading)
    assert float(np.sum(w)) == pytest.approx(2.0, rel=1e-13)


def test_kernel_h_constant_coefficients_vanish():
    cs = constant_set(0.0, 1.3)
    z = np.linspace(-3, 3, 13)
    assert np.all(kernel_H(cs, 0.0, 0.7, z, 0.4) == 0.0)


def test_kernel_h_drift_examples():
    cs = constant_set(1.0, 1.0)
    assert kernel_H(cs, 0.0, 1.0, 0.0, 0.0) == 0.0
    assert float(kernel_H(cs, 0.0, 1.0, 0.0, 1.0)) == pytest.approx(0.241971, abs=1e-6)


def test_kernel_h_d2_matches_d1_on_diagonal_problem():
    cs1 = benchmark_set()
    from paramstab.catalog import make_profile
    from paramstab.coefficients import from_profiles
    cs2 = from_profiles(2, make_profile("cos"), make_profile("sqrt-sin"), Lambda=3.0)
    # product structure: H2 = H1(x1) p1(x2) + p1(x1) H1(x2)
    z, y = np.array([0.2, -0.3]), np.array([0.9, 0.1])
    p = frozen_kernel(cs1)
    h1 = [float(kernel_H(cs1, 0, 0.5, z[k], y[k])) for k in range(2)]
    p1 = [float(p(0, 0.5, z[k], y[k])[0]) for k in range(2)]
    assert float(kernel_H(cs2, 0, 0.5, z, y)) == pytest.approx(h1[0] * p1[1] + p1[0] * h1[1], rel=1e-12)


def test_convolve_zero_kernel():
    p = frozen_kernel(constant_set())
    assert timespace_convolve(p, lambda u, t, z, y: np.zeros(len(z)), 0.0, 1.0, 0.0, 0.5) == 0.0
    cs = constant_set(0.0, 1.0)
    assert timespace_convolve(frozen_kernel(cs), parametrix_kernel(cs), 0.0, 1.0, 0.0, 0.5) == 0.0


@pytest.mark.parametrize("y", [0.0, 0.7, 2.0])
def test_convolve_chapman_kolmogorov(y):
    ref = GaussianRef(1.0)
    f = lambda s, u, x, z: ref(u - s, z - x)
    g = lambda u, t, z, y: ref(t - u, y - z)
    got = timespace_convolve(f, g, 0.0, 1.5, 0.0, y)
    assert got == pytest.approx(1.5 * float(ref(1.5, y)), rel=1e-4)


def test_convolve_reports_nonfinite():
    bad = lambda s, u, x, z: np.full(len(z), np.nan)
    with pytest.raises(EvaluationError):
        timespace_convolve(bad, bad, 0.0, 1.0, 0.0, 0.0)


@pytest.mark.parametrize("R", [0, 1, 3])
def test_series_constant_coefficients_exact(R):
    cs = constant_set(0.0, 1.4)
    ys = np.linspace(-3, 3, 7)
    res = density_series(cs, 0.0, 0.8, 0.2, ys, R=R, scheme=COARSE)
    exact = norm.pdf(ys, 0.2, 1.4 * math.sqrt(0.8))
    assert np.max(np.abs(res.value - exact)) <= 1e-10
    assert np.all(np.abs(res.terms[1:]) <= 1e-10)
    assert res.terms.shape == (R + 1, 7)


def test_series_constant_drift_and_term_decay():
    cs = constant_set(0.5, 1.0)
    res = density_series(cs, 0.0, 1.0, 0.0, [0.5], R=4, scheme=COARSE)
    exact = norm.pdf(0.0)
    assert abs(res.value[0] - exact) / exact <= 1e-2
    mag = np.abs(res.terms[:, 0])
    assert np.all(mag[2:] < mag[1:-1])


def test_series_argument_checks():
    cs = constant_set()
    with pytest.raises(InvalidArgument):
        density_series(cs, 0.0, 1.0, 0.0, 0.0, R=-1)
    with pytest.raises(InvalidArgument):
        density_series(cs, 0.0, 1.0, 0.0, 0.0, R=9)
    with pytest.raises(InvalidArgument):
        density_series(cs, 1.0, 1.0, 0.0, 0.0)


def test_tail_bound_values():
    tb = TailBound.build(1.0, 1.0, 1.0)
    assert tb.term_bounds[2] == pytest.approx(gamma(0.5) ** 2 / gamma(2.0), rel=1e-13)
    assert tb.term_bounds[2] == pytest.approx(math.pi, rel=1e-13)
    assert beta(0.5, 0.5) == pytest.approx(math.pi, rel=1e-14)


def test_truncation_order_first_term():
    tb = TailBound.build(0.1, 1.0, 0.01)
    assert tb.tail(1) < tb.term_bounds[1]
    assert truncation_order(tb, tb.term_bounds[1] * 1.001) == 1


def test_truncation_order_monotone_and_failure():
    tb = TailBound.build(0.3, 0.5, 1.0)
    orders = [truncation_order(tb, tol, cap=400) for tol in (1e-1, 1e-3, 1e-6)]
    assert orders == sorted(orders)
    assert tb.tail(orders[-1]) <= 1e-6
    # a summable bound whose terms grow for hundreds of orders before decaying
    huge = TailBound.build(1.0, 0.5, 1.0)
    assert math.isfinite(huge.tail(0)) and huge.tail(0) > 1e70
    with pytest.raises(TruncationFailure) as info:
        truncation_order(TailBound.build(3.0, 0.5, 4.0), 1e-8, cap=4)
    assert info.value.achieved_tail > 1e-8
    with pytest.raises(InvalidArgument):
        truncation_order(tb, 0.0)


def test_tail_horizon_factor():
    tb = TailBound.build(1.0, 0.5, 0.5, final_horizon=4.0)
    assert tb.horizon_factor == pytest.approx(4.0 ** 0.25)


def _audit_grid(cs, elapsed):
    return kernel_audit_grid(cs, 1.0, elapsed, np.linspace(-6, 6, 25), np.linspace(-math.pi, math.pi, 9))


def test_kernel_audit_constant_is_zero_and_deterministic():
    cs = constant_set(0.0, 1.0)
    grid = _audit_grid(cs, [0.1, 0.5])
    a, b = kernel_bound_audit(cs, grid), kernel_bound_audit(cs, grid)
    assert a.c1 == 0.0 and a == b


def test_kernel_audit_benchmark_stable_under_doubling():
    cs = benchmark_set(drift="zero")
    el = [0.05, 0.2, 0.5, 1.0]
    off, anc = np.linspace(-6, 6, 25), np.linspace(-math.pi, math.pi, 9)
    coarse = kernel_bound_audit(cs, kernel_audit_grid(cs, 1.0, el, off, anc))
    fine = kernel_bound_audit(cs, kernel_audit_grid(cs, 1.0, el, np.linspace(-6, 6, 49),
                                                    np.linspace(-math.pi, math.pi, 17)))
    assert coarse.finite and 0 < coarse.c1 < np.inf
    assert fine.c1 == pytest.approx(coarse.c1, rel=0.05)


def test_gaussian_upper_audit_constant():
    cs = constant_set(0.0, 1.0, Lambda=1.0)
    rep = gaussian_upper_audit(cs, 0.0, 1.0, 0.0, [0.0], R=0)
    assert rep.ratio == pytest.approx(math.sqrt(2.0), rel=1e-12)
    rep = gaussian_upper_audit(cs, 0.0, 1.0, 0.0, np.linspace(-3, 3, 13), R=0)
    assert rep.min_ratio_at_mode > 0


def test_gaussian_upper_audit_benchmark_finite(bench):
    ys = np.linspace(-6, 6, 25)
    rep = gaussian_upper_audit(bench, 0.0, 1.0, 0.0, ys, R=2, scheme=COARSE)
    assert rep.finite and rep.min_ratio_at_mode > 0


def test_terms_dominated_by_tail_bound(bench):
    grid = kernel_audit_grid(bench, 1.0, [0.02, 0.1, 0.3, 0.6, 1.0], np.linspace(-6, 6, 49),
                             np.linspace(-math.pi, math.pi, 17))
    c1 = kernel_bound_audit(bench, grid).c1
    tb = TailBound.build(c1, bench.gamma, 1.0)
    res = density_series(bench, 0.0, 1.0, 0.0, np.linspace(-2, 2, 41), R=4, scheme=COARSE)
    mode = int(np.argmax(res.value))
    for r in range(1, 5):
        assert abs(res.terms[r, mode]) <= tb.term_bounds[r]
