"""Experiment configuration: INI-style sections with ``key = value`` lines.

Coefficient families are written as ``name(param=value, ...)``; lists are
comma separated; ``linspace(a, b, n)`` is accepted wherever a list of
numbers is expected.
"""

import configparser
import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .catalog import family_specs, make_profile
from .coefficients import KERNELS, parse_q

KINDS = ("sde-density", "chain-density", "perturb-sweep", "mollify-sweep", "chain-compare", "price-sensitivity")
SECTIONS = {
    "experiment": {"kind", "seed", "engine", "expected_slope", "slope_tol", "ratio_spread_max"},
    "model": {"dimension", "drift", "diffusion", "gamma", "K1", "K2", "Lambda", "kappa"},
    "window": {"s", "t", "T", "N", "i", "j"},
    "probe": {"x", "ends", "space_domain", "time_grid"},
    "perturbation": {"kind", "function", "kernel", "target", "epsilons", "q"},
    "scheme": {"R", "time_nodes", "materialize_nodes", "space_nodes", "halfwidth", "chain_nodes",
               "ck_nodes", "tail_tol"},
    "innovation": {"law", "M"},
    "payoff": {"id", "strike", "t", "T"},
    "oracle": {"mc_paths", "mc_seed", "rel_tol", "abs_tol"},
}


class ConfigError(Exception):
    def __init__(self, message, field_name=None, line=None):
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}")
        self.field = field_name
        self.line = line


@dataclass(frozen=True)
class FamilyRef:
    name: str
    params: Tuple[Tuple[str, float], ...] = ()

    def profile(self):
        return make_profile(self.name, **dict(self.params))

    def __str__(self):
        if not self.params:
            return self.name
        return f"{self.name}(" + ", ".join(f"{k}={v:g}" for k, v in self.params) + ")"


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    dimension: int
    drift: FamilyRef
    diffusion: FamilyRef
    constants: Dict[str, float]
    window: Dict[str, float]
    x: List[float]
    ends: List[float]
    space_domain: Tuple[float, float]
    time_grid: List[float]
    scheme: Dict[str, float]
    law: str = "gaussian"
    M: Optional[float] = None
    perturbation: Dict[str, object] = field(default_factory=dict)
    payoff: Dict[str, object] = field(default_factory=dict)
    oracle: Dict[str, float] = field(default_factory=dict)
    checks: Dict[str, float] = field(default_factory=dict)
    engine: str = "sde"
    digest: str = ""


_FAMILY_RE = re.compile(r"^\s*([A-Za-z][\w-]*)\s*(?:\((.*)\))?\s*$")
_LINSPACE_RE = re.compile(r"^\s*linspace\s*\((.*)\)\s*$")


def _line_index(text):
    """(section, key) -> line number of its definition."""
    out, section = {}, None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
        elif "=" in line and section and not line.startswith(("#", ";")):
            out[(section, line.split("=", 1)[0].strip())] = n
    return out


class _Reader:
    def __init__(self, parser, lines):
        self.p = parser
        self.lines = lines

    def err(self, section, key, message):
        return ConfigError(f"{key}: {message}", key, self.lines.get((section, key)))

    def raw(self, section, key, default=None, required=False):
        if self.p.has_option(section, key):
            return self.p.get(section, key).strip()
        if required:
            raise ConfigError(f"missing required field {key!r} in [{section}]", key)
        return default

    def num(self, section, key, default=None, required=False, cast=float):
        v = self.raw(section, key, None, required)
        if v is None:
            return default
        try:
            if v.lower() in ("inf", "infinity"):
                return math.inf
            return cast(float(v)) if cast is int else cast(v)
        except ValueError:
            raise self.err(section, key, f"not a number: {v!r}") from None

    def numbers(self, section, key, default=None, required=False):
        v = self.raw(section, key, None, required)
        if v is None:
            return default
        try:
            m = _LINSPACE_RE.match(v)
            if m:
                a, b, n = [p.strip() for p in m.group(1).split(",")]
                a, b, n = float(a), float(b), int(n)
                if n < 2:
                    raise ValueError
                return [a + (b - a) * k / (n - 1) for k in range(n)]
            return [float(p) for p in v.split(",") if p.strip()]
        except ValueError:
            raise self.err(section, key, f"not a number list: {v!r}") from None

    def family(self, section, key, default=None, required=False):
        v = self.raw(section, key, None, required)
        if v is None:
            return default
        m = _FAMILY_RE.match(v)
        if not m:
            raise self.err(section, key, f"cannot parse family {v!r}")
        name, args = m.group(1), m.group(2)
        params = []
        if args and args.strip():
            for part in args.split(","):
                if "=" not in part:
                    raise self.err(section, key, f"parameter {part.strip()!r} needs name=value")
                k, val = part.split("=", 1)
                try:
                    params.append((k.strip(), float(val)))
                except ValueError:
                    raise self.err(section, key, f"parameter {k.strip()!r} is not a number") from None
        ref = FamilyRef(name, tuple(params))
        try:
            ref.profile()
        except Exception as exc:
            raise self.err(section, key, str(exc)) from None
        return ref


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f"cannot parse configuration ({exc.message.splitlines()[0]})", None, line) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate field {exc.option!r}", exc.option, exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section {exc.section!r}", None, exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("content before the first [section] header", None, exc.lineno) from None
    lines = _line_index(text)
    for sec in parser.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]", sec)
        for key in parser.options(sec):
            if key not in SECTIONS[sec]:
                raise ConfigError(f"unknown field {key!r} in [{sec}]", key, lines.get((sec, key)))
    r = _Reader(parser, lines)

    kind = r.raw("experiment", "kind", required=True)
    if kind not in KINDS:
        raise r.err("experiment", "kind", f"must be one of {', '.join(KINDS)}")
    seed = r.num("experiment", "seed", 0, cast=int)
    if seed < 0 or seed >= 2 ** 64:
        raise r.err("experiment", "seed", "must be an unsigned 64-bit integer")
    engine = r.raw("experiment", "engine", "sde")
    if engine not in ("sde", "chain"):
        raise r.err("experiment", "engine", "must be sde or chain")
    d = r.num("model", "dimension", 1, cast=int)
    if d not in (1, 2):
        raise r.err("model", "dimension", "must be 1 or 2")
    drift = r.family("model", "drift", required=True)
    diffusion = r.family("model", "diffusion", required=True)
    for ref, key in ((drift, "drift"), (diffusion, "diffusion")):
        spec = {s.name: s for s in family_specs()}[ref.name]
        if spec.d1_only and d != 1:
            raise r.err("model", key, f"family {ref.name!r} is available in d = 1 only")
    if {s.name: s for s in family_specs()}[diffusion.name].drift_only:
        raise r.err("model", "diffusion", f"family {diffusion.name!r} can only be used as a drift")
    constants = {}
    for key in ("gamma", "K1", "K2", "Lambda", "kappa"):
        v = r.num("model", key)
        if v is not None:
            constants[key] = v
    if "gamma" in constants and not 0 < constants["gamma"] <= 1:
        raise r.err("model", "gamma", "must lie in (0, 1]")
    if "Lambda" in constants and constants["Lambda"] < 1:
        raise r.err("model", "Lambda", "must be >= 1")

    window = {}
    for key in ("s", "t", "T"):
        v = r.num("window", key)
        if v is not None:
            window[key] = v
    for key in ("N", "i", "j"):
        v = r.num("window", key, cast=int)
        if v is not None:
            window[key] = v
    chain_kinds = ("chain-density", "chain-compare") + (("perturb-sweep",) if engine == "chain" else ())
    if kind in chain_kinds:
        window.setdefault("T", 1.0)
        if "N" not in window:
            raise ConfigError("missing required field 'N' in [window]", "N")
        if window["N"] < 1:
            raise r.err("window", "N", "must be >= 1")
        window.setdefault("i", 0)
        window.setdefault("j", window["N"])
        if not 0 <= window["i"] < window["j"] <= window["N"]:
            raise r.err("window", "j", "need 0 <= i < j <= N")
    else:
        window.setdefault("s", 0.0)
        window.setdefault("t", 1.0)
        if not window["s"] < window["t"]:
            raise r.err("window", "t", "need s < t")

    x = r.numbers("probe", "x", [0.0] * d)
    if len(x) != d:
        raise r.err("probe", "x", f"needs {d} coordinate(s)")
    ends = r.numbers("probe", "ends", None)
    if not ends:
        raise ConfigError("missing required field 'ends' in [probe]", "ends", lines.get(("probe", "ends")))
    if d == 1 and any(b <= a for a, b in zip(ends, ends[1:])):
        raise r.err("probe", "ends", "must be strictly increasing")
    if d == 2 and len(ends) % 2:
        raise r.err("probe", "ends", "d = 2 ends are flattened coordinate pairs")
    dom = r.numbers("probe", "space_domain", [-2.0 * math.pi, 2.0 * math.pi])
    if len(dom) != 2 or not dom[0] < dom[1]:
        raise r.err("probe", "space_domain", "needs lo, hi with lo < hi")
    time_grid = r.numbers("probe", "time_grid", [window.get("s", 0.0)])
    if not time_grid:
        raise r.err("probe", "time_grid", "must be nonempty")

    scheme = {
        "R": r.num("scheme", "R", None, cast=int),
        "time_nodes": r.num("scheme", "time_nodes", 32, cast=int),
        "materialize_nodes": r.num("scheme", "materialize_nodes", 32, cast=int),
        "space_nodes": r.num("scheme", "space_nodes", None, cast=int),
        "halfwidth": r.num("scheme", "halfwidth", 8.0),
        "chain_nodes": r.num("scheme", "chain_nodes", None, cast=int),
        "ck_nodes": r.num("scheme", "ck_nodes", 1025, cast=int),
        "tail_tol": r.num("scheme", "tail_tol", 1e-3),
    }
    if scheme["R"] is not None and not 0 <= scheme["R"] <= 8:
        raise r.err("scheme", "R", "must lie in 0..8")

    law = r.raw("innovation", "law", "gaussian")
    M = r.num("innovation", "M", None)
    if law not in ("gaussian", "poly-tail"):
        raise r.err("innovation", "law", "must be gaussian or poly-tail")
    if law == "poly-tail":
        if M is None:
            M = 12.0
        if d != 1:
            raise r.err("innovation", "law", "poly-tail is available in d = 1 only")
        if M <= 2 * d + 5 + constants.get("gamma", 1.0):
            raise r.err("innovation", "M", "decay order must exceed 2d + 5 + gamma")

    pert = {}
    if parser.has_section("perturbation") or kind in ("perturb-sweep", "mollify-sweep", "price-sensitivity"):
        pk = r.raw("perturbation", "kind", "mollify" if kind == "mollify-sweep" else "bump")
        if pk not in ("bump", "mollify", "drift-shift"):
            raise r.err("perturbation", "kind", "must be bump, mollify or drift-shift")
        if kind == "mollify-sweep" and pk != "mollify":
            raise r.err("perturbation", "kind", "mollify-sweep needs kind = mollify")
        pert["kind"] = pk
        pert["function"] = r.family("perturbation", "function", None)
        if pk in ("bump", "drift-shift") and pert["function"] is None:
            raise ConfigError("missing required field 'function' in [perturbation]", "function")
        kern = r.raw("perturbation", "kernel", "shifted-bump")
        if kern not in KERNELS:
            raise r.err("perturbation", "kernel", f"unknown kernel (choose from {', '.join(sorted(KERNELS))})")
        pert["kernel"] = kern
        target = r.raw("perturbation", "target", "drift" if kind == "mollify-sweep" else "both")
        if target not in ("drift", "diffusion", "both"):
            raise r.err("perturbation", "target", "must be drift, diffusion or both")
        pert["target"] = target
        eps = r.numbers("perturbation", "epsilons", [])
        if kind == "price-sensitivity" and not eps:
            eps = [0.1]
        if not eps:
            raise ConfigError("epsilons: list must be nonempty", "epsilons", lines.get(("perturbation", "epsilons")))
        if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
            raise r.err("perturbation", "epsilons", "must be positive and strictly decreasing")
        pert["epsilons"] = eps
        qv = r.raw("perturbation", "q", "inf")
        try:
            q = parse_q(qv)
        except ValueError:
            raise r.err("perturbation", "q", f"not a number: {qv!r}") from None
        if not (math.isinf(q) or q > d):
            raise r.err("perturbation", "q", f"must exceed d = {d} or be inf")
        pert["q"] = q

    payoff = {}
    if kind == "price-sensitivity":
        pid = r.raw("payoff", "id", "indicator-call")
        if pid not in ("indicator-call", "bounded-lipschitz", "unit"):
            raise r.err("payoff", "id", "must be indicator-call, bounded-lipschitz or unit")
        payoff = {"id": pid, "strike": r.num("payoff", "strike", 1.0)}
        if d != 1:
            raise r.err("model", "dimension", "price-sensitivity runs in d = 1")

    oracle = {
        "mc_paths": r.num("oracle", "mc_paths", 0, cast=int),
        "mc_seed": r.num("oracle", "mc_seed", seed, cast=int),
        "rel_tol": r.num("oracle", "rel_tol", 1e-2),
        "abs_tol": r.num("oracle", "abs_tol", 5e-3),
    }
    if oracle["mc_paths"] and oracle["mc_paths"] < 10_000:
        raise r.err("oracle", "mc_paths", "needs at least 10000 paths")
    checks = {
        "expected_slope": r.num("experiment", "expected_slope", None),
        "slope_tol": r.num("experiment", "slope_tol", 0.15),
        "ratio_spread_max": r.num("experiment", "ratio_spread_max", 5.0),
    }
    return ExperimentConfig(
        kind=kind, seed=seed, dimension=d, drift=drift, diffusion=diffusion, constants=constants,
        window=window, x=x, ends=ends, space_domain=(dom[0], dom[1]), time_grid=time_grid, scheme=scheme,
        law=law, M=M, perturbation=pert, payoff=payoff, oracle=oracle, checks=checks, engine=engine,
        digest=hashlib.sha256(text.encode()).hexdigest(),
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)
