"""Coefficient fields, perturbation families and the distances between them.

Field convention: ``drift(t, x)`` maps points ``x`` of shape (..., d) to
(..., d); ``diffusion(t, x)`` maps them to (..., d, d). ``t`` is a scalar or
broadcasts against ``x.shape[:-1]``. Matrix-valued differences are measured
in the Frobenius norm.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .catalog import Profile
from .errors import EvaluationError, InvalidArgument, InvalidKernel

Field = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CoefficientSet:
    dimension: int
    drift: Field = field(repr=False)
    diffusion: Field = field(repr=False)
    gamma: float = 1.0
    K1: float = 1.0
    K2: float = 1.0
    Lambda: float = 1.0
    kappa: float = 1.0
    time_homogeneous: bool = True
    name: str = ""
    # discontinuity locations of the drift (per axis), used as quadrature panel edges
    drift_breakpoints: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.dimension < 1:
            raise InvalidArgument("dimension must be a positive integer")
        if not 0.0 < self.gamma <= 1.0:
            raise InvalidArgument("gamma must lie in (0, 1]")
        if self.Lambda < 1.0:
            raise InvalidArgument("Lambda must be >= 1")

    def b(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.drift(t, x), dtype=float), x.shape)

    def sigma(self, t, x):
        x = np.asarray(x, dtype=float)
        d = self.dimension
        return np.broadcast_to(np.asarray(self.diffusion(t, x), dtype=float), x.shape[:-1] + (d, d))

    def a(self, t, x):
        s = self.sigma(t, x)
        return s @ np.swapaxes(s, -1, -2)

    @property
    def c(self):
        """Concentration constant of the reference Gaussian used in all reports."""
        return 1.0 / (2.0 * self.Lambda)


def profile_drift(profile: Profile, d: int = 1) -> Field:
    def drift(t, x):
        return profile(x)

    drift.profile = profile
    return drift


def profile_diffusion(profile: Profile, d: int = 1) -> Field:
    if profile.drift_only:
        raise InvalidArgument(f"family {profile.family!r} is drift-only")

    def diffusion(t, x):
        v = profile(x)
        out = np.zeros(v.shape + (v.shape[-1],))
        idx = np.arange(v.shape[-1])
        out[..., idx, idx] = v
        return out

    diffusion.profile = profile
    return diffusion


def from_profiles(d, drift: Profile, diffusion: Profile, **constants) -> CoefficientSet:
    if d > 1 and drift.family in ("sign-drift", "step-drift"):
        raise InvalidArgument(f"{drift.family} is only available in d=1")
    return CoefficientSet(
        dimension=d,
        drift=profile_drift(drift, d),
        diffusion=profile_diffusion(diffusion, d),
        drift_breakpoints=drift.breakpoints,
        **{"name": f"b={drift.family}, sigma={diffusion.family}", **constants},
    )


# ---------------------------------------------------------------- sampling


def _box(domain, d):
    dom = np.asarray(domain, dtype=float)
    if dom.ndim == 1:
        dom = np.tile(dom, (d, 1))
    if dom.shape != (d, 2) or np.any(dom[:, 1] <= dom[:, 0]):
        raise InvalidArgument(f"degenerate domain {domain!r}")
    return dom


@dataclass(frozen=True)
class SamplingPlan:
    """Deterministic pair plan: all pairs of a tensor grid plus near-diagonal
    pairs at ``dyadic_levels`` separations base*2^-k anchored at grid nodes.

    ``refine()`` doubles the grid (nested nodes) and keeps the absolute
    separations, so the refined pair set contains the original one.
    """

    points_per_axis: int = 129
    dyadic_levels: int = 10
    separation_base: Optional[float] = None

    def grid(self, domain, d):
        box = _box(domain, d)
        axes = [np.linspace(lo, hi, self.points_per_axis) for lo, hi in box]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def base_separation(self, domain, d):
        if self.separation_base is not None:
            return self.separation_base
        box = _box(domain, d)
        return float(np.min(box[:, 1] - box[:, 0])) / (self.points_per_axis - 1)

    def refine(self, domain, d):
        return replace(self, points_per_axis=2 * self.points_per_axis - 1,
                       separation_base=self.base_separation(domain, d))

    def pair_count(self, d):
        n = self.points_per_axis ** d
        return n * (n - 1) // 2 + n * self.dyadic_levels * 2 * d


def _flat_values(f, pts):
    vals = np.asarray(f(pts), dtype=float)
    vals = vals.reshape(pts.shape[0], -1)
    bad = ~np.all(np.isfinite(vals), axis=1)
    if np.any(bad):
        p = pts[np.argmax(bad)]
        raise EvaluationError(f"non-finite field value at {p.tolist()}", point=p)
    return vals


def holder_seminorm(f, gamma, domain, sampler: SamplingPlan = SamplingPlan(), d=None, chunk=2048):
    """Max of |f(x) - f(y)| / |x - y|^gamma over the sampler's pairs.

    A lower bound of the true seminorm; nondecreasing under ``sampler.refine``.
    """
    if not 0.0 < gamma <= 1.0:
        raise InvalidArgument("gamma must lie in (0, 1]")
    d = d if d is not None else (1 if np.asarray(domain).ndim == 1 else len(domain))
    if sampler.points_per_axis < 2:
        raise InvalidArgument("empty sample plan")
    if sampler.pair_count(d) < 1000:
        raise InvalidArgument("sample plan must provide at least 1000 pairs")
    box = _box(domain, d)
    pts = sampler.grid(box, d)
    vals = _flat_values(f, pts)
    best = 0.0
    n = pts.shape[0]
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        dx = np.linalg.norm(pts[start:stop, None, :] - pts[None, :, :], axis=-1)
        dv = np.linalg.norm(vals[start:stop, None, :] - vals[None, :, :], axis=-1)
        mask = dx > 0
        if np.any(mask):
            best = max(best, float(np.max(dv[mask] / dx[mask] ** gamma)))
    base = sampler.base_separation(box, d)
    for k in range(1, sampler.dyadic_levels + 1):
        delta = base * 2.0 ** (-k)
        for axis in range(d):
            for sign in (1.0, -1.0):
                shifted = pts.copy()
                shifted[:, axis] += sign * delta
                inside = (shifted[:, axis] >= box[axis, 0]) & (shifted[:, axis] <= box[axis, 1])
                if not np.any(inside):
                    continue
                sv = _flat_values(f, shifted[inside])
                dv = np.linalg.norm(sv - vals[inside], axis=-1)
                best = max(best, float(np.max(dv)) / delta ** gamma)
    return best


def sup_norm(f, domain, sampler: SamplingPlan = SamplingPlan(), d=None):
    d = d if d is not None else (1 if np.asarray(domain).ndim == 1 else len(domain))
    pts = sampler.grid(domain, d)
    vals = _flat_values(f, pts)
    return float(np.max(np.linalg.norm(vals, axis=-1)))


def holder_norm(f, gamma, domain, sampler: SamplingPlan = SamplingPlan(), d=None):
    """Full Holder norm: sup part plus seminorm."""
    return sup_norm(f, domain, sampler, d) + holder_seminorm(f, gamma, domain, sampler, d)


# ------------------------------------------------------------ mollification


@dataclass(frozen=True)
class MollifierKernel:
    """One-dimensional kernel rho; in d > 1 the tensor product is used."""

    name: str
    density: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    support: Tuple[float, float] = (-1.0, 1.0)
    symmetric: bool = True

    def nodes(self, d=1, per_axis=257):
        """Composite-Simpson nodes and weights (rho folded in) on the support."""
        if per_axis % 2 == 0:
            per_axis += 1
        lo, hi = self.support
        u = np.linspace(lo, hi, per_axis)
        h = (hi - lo) / (per_axis - 1)
        w = np.ones(per_axis)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= h / 3.0
        rho = np.asarray(self.density(u), dtype=float)
        if np.any(rho < 0):
            raise InvalidKernel(f"kernel {self.name!r} takes negative values")
        w1 = w * rho
        if d == 1:
            return u[:, None], w1
        mesh = np.meshgrid(*([u] * d), indexing="ij")
        wmesh = np.meshgrid(*([w1] * d), indexing="ij")
        return (np.stack([m.ravel() for m in mesh], axis=-1),
                np.prod(np.stack([m.ravel() for m in wmesh]), axis=0))

    def mass(self, d=1):
        return float(np.sum(self.nodes(d)[1]))


def _bump(u):
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


# integral of exp(-1/(1-u^2)) over (-1, 1)
_BUMP_MASS = 0.44399381616807943782


def _triangular(u):
    return np.clip(1.0 - np.abs(u), 0.0, None)


KERNELS = {
    "triangular": MollifierKernel("triangular", _triangular, (-1.0, 1.0), True),
    "smooth-bump": MollifierKernel("smooth-bump", lambda u: _bump(u) / _BUMP_MASS, (-1.0, 1.0), True),
    # one-sided C^infinity bump on [0, 1]
    "shifted-bump": MollifierKernel(
        "shifted-bump", lambda u: 2.0 * _bump(2.0 * np.asarray(u, dtype=float) - 1.0) / _BUMP_MASS,
        (0.0, 1.0), False),
}


def mollify(field_fn: Field, rho: MollifierKernel, eps: float, d: int = 1, per_axis: int = 257) -> Field:
    """Spatial convolution of ``field_fn`` with rho_eps(x) = eps^-d rho(x/eps)."""
    if not eps > 0:
        raise InvalidArgument("eps must be positive")
    u, w = rho.nodes(d, per_axis)
    mass = float(np.sum(w))
    if abs(mass - 1.0) > 1e-6:
        raise InvalidKernel(f"kernel {rho.name!r} integrates to {mass!r}, not 1")
    # remove the residual quadrature error so constants are reproduced exactly
    w = w / mass

    def smoothed(t, x):
        x = np.asarray(x, dtype=float)
        acc = None
        for uj, wj in zip(u, w):
            if wj == 0.0:
                continue
            v = wj * np.asarray(field_fn(t, x - eps * uj), dtype=float)
            acc = v if acc is None else acc + v
        return acc

    return smoothed


# ----------------------------------------------------------- perturbations


@dataclass(frozen=True)
class PerturbationFamily:
    """Rule eps -> (b_eps, sigma_eps).

    kind "bump": sigma + eps*function (function is matrix valued);
    kind "mollify": convolution with kernel at scale eps, on ``target``;
    kind "drift-shift": b + eps*function (function is vector valued).
    """

    kind: str
    base: CoefficientSet
    function: Optional[Field] = field(default=None, repr=False)
    kernel: Optional[MollifierKernel] = None
    target: str = "both"
    function_support_compact: bool = False
    function_breakpoints: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("bump", "mollify", "drift-shift"):
            raise InvalidArgument(f"unknown perturbation kind {self.kind!r}")
        if self.kind in ("bump", "drift-shift") and self.function is None:
            raise InvalidArgument(f"{self.kind} perturbation needs a function")
        if self.kind == "mollify" and self.kernel is None:
            raise InvalidArgument("mollify perturbation needs a kernel")
        if self.target not in ("drift", "diffusion", "both"):
            raise InvalidArgument(f"unknown mollification target {self.target!r}")

    @property
    def difference_compact(self):
        """Whether b - b_eps is compactly supported."""
        if self.kind == "bump":
            return True
        if self.kind == "drift-shift":
            return self.function_support_compact
        return self.target == "diffusion"

    def at(self, eps: float) -> CoefficientSet:
        base = self.base
        if eps == 0:
            return base
        if eps < 0:
            raise InvalidArgument("eps must be nonnegative")
        b, s, fn = base.drift, base.diffusion, self.function
        bps = base.drift_breakpoints
        if self.kind == "bump":
            def diffusion(t, x):
                return s(t, x) + eps * np.asarray(fn(t, x), dtype=float)
            return replace(base, diffusion=diffusion, name=f"{base.name} +bump({eps:g})")
        if self.kind == "drift-shift":
            def drift(t, x):
                return b(t, x) + eps * np.asarray(fn(t, x), dtype=float)
            return replace(base, drift=drift, drift_breakpoints=tuple(sorted(set(bps + self.function_breakpoints))),
                           name=f"{base.name} +shift({eps:g})")
        d = base.dimension
        new_b = mollify(b, self.kernel, eps, d) if self.target in ("drift", "both") else b
        new_s = mollify(s, self.kernel, eps, d) if self.target in ("diffusion", "both") else s
        return replace(base, drift=new_b, diffusion=new_s,
                       drift_breakpoints=() if self.target != "diffusion" else bps,
                       name=f"{base.name} *rho({eps:g})")


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class DeltaMetrics:
    delta_b_sup: float
    delta_b_lq: float
    q: float
    delta_sigma_holder: float
    delta_total: float
    alpha_q: float
    sigma_sup: float = 0.0
    sigma_seminorm: float = 0.0
    lq_status: str = "compact"


def parse_q(q):
    if isinstance(q, str):
        if q.strip().lower() in ("inf", "infinity", "oo"):
            return math.inf
        q = float(q)
    return float(q)


def alpha_q(q, d):
    q = parse_q(q)
    return 0.5 if math.isinf(q) else 0.5 * (1.0 - d / q)


def _gl_panels(lo, hi, breakpoints, panels, order):
    edges = sorted({lo, hi, *[p for p in breakpoints if lo < p < hi]})
    per = max(1, panels // (len(edges) - 1))
    g, gw = np.polynomial.legendre.leggauss(order)
    xs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        sub = np.linspace(a, b, per + 1)
        for c, e in zip(sub[:-1], sub[1:]):
            xs.append(0.5 * (e - c) * g + 0.5 * (e + c))
            ws.append(0.5 * (e - c) * gw)
    return np.concatenate(xs), np.concatenate(ws)


def lq_norm(f, q, domain, d, breakpoints=(), panels=64, order=8):
    """Tensor Gauss-Legendre L^q norm over a box; panel edges at breakpoints."""
    box = _box(domain, d)
    rules = [_gl_panels(lo, hi, breakpoints, panels, order) for lo, hi in box]
    mesh = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wmesh = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    w = np.prod(np.stack([m.ravel() for m in wmesh]), axis=0)
    vals = np.linalg.norm(_flat_values(f, pts), axis=-1)
    return float(np.sum(w * vals ** q) ** (1.0 / q))


def delta_metrics(pair, q, time_grid, space_domain, sampler: SamplingPlan = SamplingPlan(),
                  difference_compact: bool = False) -> DeltaMetrics:
    """Distances between two coefficient sets (base, perturbed).

    Sup metrics are maxima over ``time_grid`` x the sampler grid; the L^q
    metric integrates |b - b_eps|^q over ``space_domain``; the Holder metric
    is sup part plus sampled seminorm of sigma - sigma_eps.
    """
    base, pert = pair
    d = base.dimension
    q = parse_q(q)
    if not (math.isinf(q) or q > d):
        raise InvalidArgument(f"q must exceed the dimension d={d} (got {q})")
    times = np.atleast_1d(np.asarray(time_grid, dtype=float))
    if times.size == 0:
        raise InvalidArgument("time grid is empty")
    gamma = base.gamma
    bps = tuple(sorted(set(base.drift_breakpoints + pert.drift_breakpoints)))
    b_sup = b_lq = s_sup = s_semi = s_hold = 0.0
    for t in times:
        db = lambda x, t=t: base.b(t, x) - pert.b(t, x)
        ds = lambda x, t=t: base.sigma(t, x) - pert.sigma(t, x)
        b_sup = max(b_sup, sup_norm(db, space_domain, sampler, d))
        if not math.isinf(q):
            b_lq = max(b_lq, lq_norm(db, q, space_domain, d, bps))
        sup_part = sup_norm(ds, space_domain, sampler, d)
        semi = holder_seminorm(ds, gamma, space_domain, sampler, d)
        s_sup, s_semi = max(s_sup, sup_part), max(s_semi, semi)
        s_hold = max(s_hold, sup_part + semi)
    if math.isinf(q):
        b_lq = b_sup
    return DeltaMetrics(
        delta_b_sup=b_sup,
        delta_b_lq=b_lq,
        q=q,
        delta_sigma_holder=s_hold,
        delta_total=s_hold + b_lq,
        alpha_q=alpha_q(q, d),
        sigma_sup=s_sup,
        sigma_seminorm=s_semi,
        lq_status="compact" if (difference_compact or math.isinf(q) or b_lq == 0.0) else "truncated",
    )


# ------------------------------------------------------------------ audit


@dataclass(frozen=True)
class AssumptionReport:
    drift_sup: float
    diffusion_sup: float
    eig_min: float
    eig_max: float
    diffusion_holder: float
    drift_holder: float
    k1_ok: bool
    k2_ok: bool
    ellipticity_ok: bool
    holder_ok: bool
    drift_holder_ok: bool

    @property
    def passed(self):
        return self.k1_ok and self.k2_ok and self.ellipticity_ok and self.holder_ok


def assumption_report(cs: CoefficientSet, time_grid, space_domain,
                      sampler: SamplingPlan = SamplingPlan(), rtol=1e-9) -> AssumptionReport:
    """Measure boundedness, ellipticity (eigenvalues of a) and Holder quotients
    on the grids and compare them with the declared constants."""
    d = cs.dimension
    pts = sampler.grid(space_domain, d)
    b_sup = s_sup = hs = hb = 0.0
    lo, hi = math.inf, 0.0
    for t in np.atleast_1d(np.asarray(time_grid, dtype=float)):
        b_sup = max(b_sup, float(np.max(np.linalg.norm(cs.b(t, pts), axis=-1))))
        sig = cs.sigma(t, pts)
        s_sup = max(s_sup, float(np.max(np.linalg.norm(sig.reshape(len(pts), -1), axis=-1))))
        eig = np.linalg.eigvalsh(cs.a(t, pts))
        lo, hi = min(lo, float(eig.min())), max(hi, float(eig.max()))
        hs = max(hs, holder_seminorm(lambda x, t=t: cs.sigma(t, x), cs.gamma, space_domain, sampler, d))
        hb = max(hb, holder_seminorm(lambda x, t=t: cs.b(t, x), cs.gamma, space_domain, sampler, d))
    tol = 1.0 + rtol
    return AssumptionReport(
        drift_sup=b_sup, diffusion_sup=s_sup, eig_min=lo, eig_max=hi,
        diffusion_holder=hs, drift_holder=hb,
        k1_ok=b_sup <= cs.K1 * tol,
        k2_ok=s_sup <= cs.K2 * tol,
        ellipticity_ok=(lo * tol >= 1.0 / cs.Lambda) and (hi <= cs.Lambda * tol),
        holder_ok=hs <= cs.kappa * tol,
        drift_holder_ok=hb <= cs.kappa * tol,
    )
