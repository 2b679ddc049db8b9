"""Analytic scalar profiles from which coefficient fields are assembled.

A profile is a vectorised map R -> R applied componentwise: a drift built
from profile f is b(t, x)_i = f(x_i), a diffusion is diag(f(x_1), ..., f(x_d)).
Only the families registered here can be named in experiment configs.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class Profile:
    family: str
    params: Tuple[Tuple[str, float], ...]
    fn: Callable[[np.ndarray], np.ndarray] = field(compare=False, repr=False)
    holder_exponent: float = 1.0
    breakpoints: Tuple[float, ...] = ()
    support: Optional[Tuple[float, float]] = None
    drift_only: bool = False

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def param(self, name):
        return dict(self.params)[name]


@dataclass(frozen=True)
class FamilySpec:
    name: str
    defaults: Dict[str, float]
    summary: str
    holder_exponent: float
    drift_only: bool = False
    d1_only: bool = False


def _sin(p):
    return lambda x: p["offset"] + p["amplitude"] * np.sin(p["frequency"] * x + p["phase"])


def _cos(p):
    return lambda x: p["offset"] + p["amplitude"] * np.cos(p["frequency"] * x + p["phase"])


def _sqrt_sin(p):
    if p["offset"] <= abs(p["amplitude"]):
        raise InvalidArgument("sqrt-sin needs offset > |amplitude| to stay positive")
    return lambda x: np.sqrt(p["offset"] + p["amplitude"] * np.sin(p["frequency"] * x))


def _abs_sin(p):
    return lambda x: p["offset"] + p["amplitude"] * np.abs(np.sin(p["frequency"] * x))


def _root_abs_sin(p):
    return lambda x: p["offset"] + p["amplitude"] * np.sqrt(np.abs(np.sin(p["frequency"] * x)))


def _sign(p):
    return lambda x: p["amplitude"] * np.sign(x)


def _step(p):
    return lambda x: np.where(x < p["at"], p["left"], p["right"])


def _indicator(p):
    if not p["lo"] < p["hi"]:
        raise InvalidArgument("indicator needs lo < hi")
    return lambda x: np.where((x >= p["lo"]) & (x < p["hi"]), p["value"], 0.0)


_FAMILIES = {
    "constant": (FamilySpec("constant", {"value": 1.0}, "value", 1.0),
                 lambda p: (lambda x: np.full(np.shape(x), p["value"]))),
    "affine": (FamilySpec("affine", {"intercept": 0.0, "slope": 1.0},
                          "intercept + slope*x (unbounded; audit flags it)", 1.0),
               lambda p: (lambda x: p["intercept"] + p["slope"] * x)),
    "sin": (FamilySpec("sin", {"offset": 0.0, "amplitude": 1.0, "frequency": 1.0, "phase": 0.0},
                       "offset + amplitude*sin(frequency*x + phase)", 1.0), _sin),
    "cos": (FamilySpec("cos", {"offset": 0.0, "amplitude": 1.0, "frequency": 1.0, "phase": 0.0},
                       "offset + amplitude*cos(frequency*x + phase)", 1.0), _cos),
    "sqrt-sin": (FamilySpec("sqrt-sin", {"offset": 2.0, "amplitude": 1.0, "frequency": 1.0},
                            "sqrt(offset + amplitude*sin(frequency*x))", 1.0), _sqrt_sin),
    "abs-sin": (FamilySpec("abs-sin", {"offset": 0.0, "amplitude": 1.0, "frequency": 1.0},
                           "offset + amplitude*|sin(frequency*x)|  (Lipschitz, not C^1)", 1.0),
                _abs_sin),
    "root-abs-sin": (FamilySpec("root-abs-sin", {"offset": 0.0, "amplitude": 1.0, "frequency": 1.0},
                                "offset + amplitude*sqrt|sin(frequency*x)|  (1/2-Holder)", 0.5),
                     _root_abs_sin),
    "sign-drift": (FamilySpec("sign-drift", {"amplitude": 1.0}, "amplitude*sign(x)", 0.0,
                              drift_only=True, d1_only=True), _sign),
    "step-drift": (FamilySpec("step-drift", {"left": 0.0, "right": 1.0, "at": 0.0},
                              "left for x < at, right otherwise", 0.0,
                              drift_only=True, d1_only=True), _step),
    "indicator": (FamilySpec("indicator", {"value": 1.0, "lo": 0.0, "hi": 1.0},
                             "value on [lo, hi), 0 elsewhere (compact support)", 0.0,
                             drift_only=True), _indicator),
}


def family_specs():
    return [spec for spec, _ in _FAMILIES.values()]


def make_profile(name: str, **params) -> Profile:
    if name not in _FAMILIES:
        raise InvalidArgument(f"unknown coefficient family {name!r}")
    spec, builder = _FAMILIES[name]
    unknown = set(params) - set(spec.defaults)
    if unknown:
        raise InvalidArgument(f"family {name!r} has no parameter(s) {sorted(unknown)}")
    p = {**spec.defaults, **{k: float(v) for k, v in params.items()}}
    breakpoints: Tuple[float, ...] = ()
    support = None
    if name == "sign-drift":
        breakpoints = (0.0,)
    elif name == "step-drift":
        breakpoints = (p["at"],)
    elif name == "indicator":
        breakpoints = (p["lo"], p["hi"])
        support = (p["lo"], p["hi"])
    return Profile(
        family=name,
        params=tuple(sorted(p.items())),
        fn=builder(p),
        holder_exponent=spec.holder_exponent,
        breakpoints=breakpoints,
        support=support,
        drift_only=spec.drift_only,
    )
