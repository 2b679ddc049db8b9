import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import benchmark_set, constant_set
from paramstab.catalog import make_profile
from paramstab.coefficients import (KERNELS, CoefficientSet, PerturbationFamily, SamplingPlan,
                                    alpha_q, assumption_report, delta_metrics, from_profiles,
                                    holder_norm, holder_seminorm, lq_norm, mollify, sup_norm)
from paramstab.errors import EvaluationError, InvalidArgument, InvalidKernel
from paramstab.oracles import rate_fit


def _scalar(fn):
    return lambda x: fn(np.asarray(x)[..., 0])[..., None]


# ------------------------------------------------------------ holder norms

def test_holder_linear_is_one():
    assert holder_seminorm(_scalar(lambda x: x), 1.0, [0.0, 1.0]) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("g", [0.2, 0.5, 1.0])
def test_holder_constant_is_zero(g):
    assert holder_seminorm(_scalar(lambda x: 0 * x + 3.0), g, [-1.0, 1.0]) == 0.0


def test_holder_root_abs_half():
    v = holder_seminorm(_scalar(lambda x: np.sqrt(np.abs(x))), 0.5, [-1.0, 1.0])
    assert 0.99 <= v <= 1.0 + 1e-12


def test_holder_monotone_under_refinement():
    f = _scalar(lambda x: np.sqrt(np.abs(np.sin(3 * x))))
    plan = SamplingPlan(points_per_axis=65)
    coarse = holder_seminorm(f, 0.5, [-2.0, 2.0], plan)
    fine = holder_seminorm(f, 0.5, [-2.0, 2.0], plan.refine([-2.0, 2.0], 1))
    assert fine >= coarse


def test_holder_d2_uses_norms():
    f = lambda x: np.asarray(x) @ np.array([[1.0], [1.0]])
    v = holder_seminorm(f, 1.0, [[0, 1], [0, 1]], SamplingPlan(points_per_axis=33))
    assert v == pytest.approx(math.sqrt(2.0), rel=1e-12)


def test_holder_argument_checks():
    f = _scalar(lambda x: x)
    with pytest.raises(InvalidArgument):
        holder_seminorm(f, 0.0, [0, 1])
    with pytest.raises(InvalidArgument):
        holder_seminorm(f, 1.0, [0, 1], SamplingPlan(points_per_axis=1))
    with pytest.raises(InvalidArgument):
        holder_seminorm(f, 1.0, [0, 1], SamplingPlan(points_per_axis=8, dyadic_levels=1))
    with pytest.raises(InvalidArgument):
        holder_seminorm(f, 1.0, [1, 0])


def test_holder_nonfinite_reports_point():
    with pytest.raises(EvaluationError) as info, np.errstate(divide="ignore"):
        holder_seminorm(_scalar(lambda x: 1.0 / x), 1.0, [0.0, 1.0])
    assert info.value.point is not None


def test_holder_norm_adds_sup():
    f = _scalar(lambda x: 2.0 + x)
    assert holder_norm(f, 1.0, [0, 1]) == pytest.approx(sup_norm(f, [0, 1]) + 1.0)


# -------------------------------------------------------------- metrics

def test_delta_identical_pair_is_zero():
    cs = benchmark_set()
    m = delta_metrics((cs, cs), 2.0, [0.0, 0.5], [-3, 3], SamplingPlan(points_per_axis=65))
    assert m.delta_b_sup == m.delta_b_lq == m.delta_sigma_holder == m.delta_total == 0.0


def test_delta_constant_shift_sup():
    cs = benchmark_set()
    fam = PerturbationFamily("drift-shift", cs, function=lambda t, x: np.ones_like(np.asarray(x)))
    m = delta_metrics((cs, fam.at(0.3)), "inf", [0.0], [-3, 3], SamplingPlan(points_per_axis=65))
    assert m.delta_b_sup == pytest.approx(0.3, rel=1e-12)
    assert m.delta_b_lq == m.delta_b_sup
    assert m.alpha_q == 0.5


def test_delta_indicator_lq():
    cs = benchmark_set()
    ind = make_profile("indicator", lo=0.0, hi=1.0)
    fam = PerturbationFamily("drift-shift", cs, function=lambda t, x: ind(x),
                             function_support_compact=True, function_breakpoints=ind.breakpoints)
    eps = 0.2
    m = delta_metrics((cs, fam.at(eps)), 2.0, [0.0], [-3, 3], SamplingPlan(points_per_axis=65),
                      difference_compact=fam.difference_compact)
    assert abs(m.delta_b_lq - eps) <= 1e-6
    assert m.lq_status == "compact"


def test_delta_q_must_exceed_dimension():
    cs = benchmark_set()
    with pytest.raises(InvalidArgument):
        delta_metrics((cs, cs), 1.0, [0.0], [-1, 1])


@pytest.mark.parametrize("kind", ["bump", "mollify"])
def test_every_family_is_zero_at_eps_zero(kind):
    cs = benchmark_set()
    fam = (PerturbationFamily("bump", cs, function=lambda t, x: np.sin(np.asarray(x))[..., None])
           if kind == "bump" else PerturbationFamily("mollify", cs, kernel=KERNELS["smooth-bump"]))
    m = delta_metrics((cs, fam.at(0.0)), 4.0, [0.0], [-3, 3], SamplingPlan(points_per_axis=65))
    assert m.delta_total == 0.0


@settings(max_examples=10, deadline=None)
@given(st.floats(min_value=0.01, max_value=0.5))
def test_bump_holder_is_linear_in_eps(eps):
    cs = benchmark_set()
    psi = lambda t, x: np.sin(np.asarray(x))[..., None]
    plan = SamplingPlan(points_per_axis=65)
    m = delta_metrics((cs, PerturbationFamily("bump", cs, function=psi).at(eps)), "inf", [0.0], [-3, 3], plan)
    ref = holder_seminorm(lambda x: psi(0, x)[..., 0], 1.0, [-3, 3], plan) + sup_norm(
        lambda x: psi(0, x)[..., 0], [-3, 3], plan)
    # equal up to the rounding of (sigma + eps psi) - sigma
    assert m.delta_sigma_holder == pytest.approx(eps * ref, rel=1e-9)


def test_lq_norm_constant():
    assert lq_norm(lambda x: np.ones(len(x))[:, None], 3.0, [0, 8], 1) == pytest.approx(2.0, rel=1e-13)


def test_alpha_q():
    assert alpha_q(4, 1) == pytest.approx(0.375)
    assert alpha_q("inf", 2) == 0.5


# ----------------------------------------------------------- mollification

@pytest.mark.parametrize("eps", [0.05, 0.3, 1.0])
def test_mollified_sign_vanishes_at_zero(eps):
    sign = make_profile("sign-drift")
    field = mollify(lambda t, x: sign(x), KERNELS["triangular"], eps)
    assert abs(float(field(0.0, np.array([[0.0]]))[0, 0])) < 1e-15


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_mollified_constant_is_constant(name):
    field = mollify(lambda t, x: np.full_like(np.asarray(x, dtype=float), 2.5), KERNELS[name], 0.1)
    x = np.linspace(-2, 2, 9)[:, None]
    assert np.allclose(field(0.0, x), 2.5, atol=1e-10)


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_kernel_masses(name):
    assert KERNELS[name].mass() == pytest.approx(1.0, abs=1e-9)


def test_bad_kernel_rejected():
    from paramstab.coefficients import MollifierKernel
    bad = MollifierKernel("half", lambda u: 0.3 * np.ones_like(u))
    with pytest.raises(InvalidKernel):
        mollify(lambda t, x: x, bad, 0.1)
    neg = MollifierKernel("neg", lambda u: u)
    with pytest.raises(InvalidKernel):
        neg.nodes()


def test_mollify_sin_rate():
    x = np.linspace(-4, 4, 10_001)[:, None]
    epss = [0.2, 0.1, 0.05]
    gaps = []
    for eps in epss:
        field = mollify(lambda t, z: np.sin(z), KERNELS["shifted-bump"], eps)
        gaps.append(float(np.max(np.abs(field(0.0, x) - np.sin(x)))))
    assert rate_fit(epss, gaps).slope == pytest.approx(1.0, abs=0.1)


def test_mollify_two_dimensional_constant():
    field = mollify(lambda t, x: np.asarray(x)[..., :1] * 0 + 1.0, KERNELS["smooth-bump"], 0.2, d=2, per_axis=129)
    assert field(0.0, np.array([[0.3, -0.1]]))[0, 0] == pytest.approx(1.0, abs=1e-8)


def test_family_validation():
    cs = benchmark_set()
    with pytest.raises(InvalidArgument):
        PerturbationFamily("twist", cs)
    with pytest.raises(InvalidArgument):
        PerturbationFamily("bump", cs)
    with pytest.raises(InvalidArgument):
        PerturbationFamily("mollify", cs)
    with pytest.raises(InvalidArgument):
        PerturbationFamily("bump", cs, function=lambda t, x: x).at(-0.1)


# ------------------------------------------------------------------ audit

def test_assumptions_identity():
    cs = constant_set(0.0, 1.0, K1=0.0, K2=1.0, Lambda=1.0)
    rep = assumption_report(cs, [0.0], [-2, 2], SamplingPlan(points_per_axis=33))
    assert rep.eig_min == pytest.approx(1.0) and rep.eig_max == pytest.approx(1.0)
    assert rep.passed


def test_assumptions_two_plus_sin():
    # a = (2 + sin x)^2 ranges over [1, 9], so the declared Lambda must cover 9
    sig = make_profile("sin", offset=2.0)
    plan = SamplingPlan(points_per_axis=129)
    cs3 = from_profiles(1, make_profile("constant", value=0.0), sig, K1=0.0, K2=3.0, Lambda=3.0, kappa=1.0)
    rep = assumption_report(cs3, [0.0], [-4, 4], plan)
    assert rep.eig_min >= 1.0 - 1e-9 and rep.eig_max <= 9.0 + 1e-9
    assert rep.eig_max == pytest.approx(9.0, rel=1e-3)
    assert not rep.ellipticity_ok
    cs9 = from_profiles(1, make_profile("constant", value=0.0), sig, K1=0.0, K2=3.0, Lambda=9.0, kappa=1.0)
    assert assumption_report(cs9, [0.0], [-4, 4], plan).passed


def test_assumptions_sign_drift_flagged():
    cs = from_profiles(1, make_profile("sign-drift"), make_profile("constant", value=1.0),
                       K1=1.0, K2=1.0, Lambda=1.0, kappa=1.0)
    for g in (0.3, 1.0):
        rep = assumption_report(replace_gamma(cs, g), [0.0], [-1, 1], SamplingPlan(points_per_axis=33))
        assert not rep.drift_holder_ok


def replace_gamma(cs, g):
    from dataclasses import replace
    return replace(cs, gamma=g)


def test_coefficient_set_validation():
    f = lambda t, x: x
    with pytest.raises(InvalidArgument):
        CoefficientSet(0, f, f)
    with pytest.raises(InvalidArgument):
        CoefficientSet(1, f, f, gamma=1.5)
    with pytest.raises(InvalidArgument):
        CoefficientSet(1, f, f, Lambda=0.5)
    assert constant_set(Lambda=2.0).c == 0.25


def test_sign_drift_not_in_d2():
    with pytest.raises(InvalidArgument):
        from_profiles(2, make_profile("sign-drift"), make_profile("constant"))
    with pytest.raises(InvalidArgument):
        from_profiles(1, make_profile("constant"), make_profile("sign-drift"))
