import math

import mpmath
import pytest
from hypothesis import given, settings, strategies as st

from paramstab.errors import InvalidArgument
from paramstab.special import beta, beta_integral, gamma, log_gamma


@given(st.floats(min_value=0.05, max_value=60.0))
def test_gamma_matches_stdlib(x):
    assert gamma(x) == pytest.approx(math.gamma(x), rel=1e-13)


@given(st.floats(min_value=-6.5, max_value=-0.01).filter(lambda v: abs(v - round(v)) > 1e-3))
def test_gamma_reflection_negative(x):
    assert gamma(x) == pytest.approx(math.gamma(x), rel=1e-11)


def test_gamma_half_is_root_pi():
    assert gamma(0.5) == pytest.approx(math.sqrt(math.pi), rel=1e-15)


@pytest.mark.parametrize("x", [0.0, -1.0, -3.0])
def test_gamma_poles(x):
    with pytest.raises(InvalidArgument):
        gamma(x)


@given(st.floats(min_value=0.01, max_value=1e4))
def test_log_gamma(x):
    assert log_gamma(x) == pytest.approx(math.lgamma(x), rel=1e-13, abs=1e-13)


def test_log_gamma_domain():
    with pytest.raises(InvalidArgument):
        log_gamma(-0.5)


def test_beta_half_half_is_pi():
    assert beta(0.5, 0.5) == pytest.approx(math.pi, rel=1e-14)
    assert beta_integral(0.5, 0.5) == pytest.approx(math.pi, rel=1e-12)


@settings(max_examples=40)
@given(st.floats(min_value=0.15, max_value=6.0), st.floats(min_value=0.15, max_value=6.0))
def test_beta_integral_cross_checks_gamma_route(a, b):
    ref = float(mpmath.beta(a, b))
    assert beta(a, b) == pytest.approx(ref, rel=1e-12)
    assert beta_integral(a, b) == pytest.approx(ref, rel=1e-12)


def test_beta_domain():
    with pytest.raises(InvalidArgument):
        beta(0.0, 1.0)
    with pytest.raises(InvalidArgument):
        beta_integral(1.0, -1.0)
