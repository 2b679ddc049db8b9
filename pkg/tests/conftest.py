import math

import numpy as np
import pytest

from paramstab.catalog import make_profile
from paramstab.coefficients import CoefficientSet, from_profiles


def constant_set(b=0.0, s=1.0, d=1, **kw):
    kw.setdefault("K1", max(abs(b), 1e-12) * math.sqrt(d))
    kw.setdefault("K2", abs(s) * math.sqrt(d))
    kw.setdefault("Lambda", max(1.0, s * s, 1.0 / (s * s)))
    return from_profiles(d, make_profile("constant", value=b), make_profile("constant", value=s), **kw)


def benchmark_set(drift="cos"):
    """sigma = sqrt(2 + sin x), b = cos x (or zero drift)."""
    dprof = make_profile("cos") if drift == "cos" else make_profile("constant", value=0.0)
    return from_profiles(1, dprof, make_profile("sqrt-sin", offset=2.0, amplitude=1.0),
                         K1=1.0, K2=math.sqrt(3.0), Lambda=3.0, kappa=0.5)


def sin_field(t, x):
    return np.sin(np.asarray(x))[..., None]


@pytest.fixture
def bench():
    return benchmark_set()


@pytest.fixture
def bench_driftless():
    return benchmark_set(drift="zero")
