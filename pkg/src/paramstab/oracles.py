"""Reference engines and comparison machinery.

Monte Carlo (Euler paths + Gaussian kernel density estimate with batch-means
standard errors) and an exact grid recursion for chains serve as ground
truth for the parametrix engines. compare_densities / rate_fit /
stability_sweep turn density gaps into the numbers the stability bounds
talk about.
"""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .coefficients import CoefficientSet, DeltaMetrics, PerturbationFamily, SamplingPlan, delta_metrics
from .errors import InvalidArgument, RefinementRequired, Unsupported
from .gaussian_core import ConcentrationProfile, GaussianRef, p_c_eval, scaled_profile
from .parametrix_chain import ChainGrid, ChainModel, chain_density_parametrix, one_step_density
from .parametrix_sde import ConvolutionScheme, density_series

PROVENANCES = ("parametrix-sde", "parametrix-chain", "mc", "grid-ck")


def ordered_map(fn, items, threads=1):
    """map() whose result order never depends on the worker count."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


@dataclass
class DensityGrid:
    """values[e, s, k]: density at elapsed[e], start starts[s], end ends[k].

    Start/end points are (n, d) arrays; in d = 1 they must be strictly
    increasing.
    """

    elapsed: np.ndarray
    starts: np.ndarray
    ends: np.ndarray
    values: np.ndarray
    provenance: str
    scheme: str = ""
    seed: Optional[int] = None
    stderr: Optional[np.ndarray] = None
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise InvalidArgument(f"unknown provenance {self.provenance!r}")
        self.elapsed = np.atleast_1d(np.asarray(self.elapsed, dtype=float))
        self.starts = np.asarray(self.starts, dtype=float).reshape(len(np.atleast_1d(self.starts)), -1)
        self.ends = np.asarray(self.ends, dtype=float)
        if self.ends.ndim == 1:
            self.ends = self.ends[:, None]
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.elapsed), len(self.starts), len(self.ends))
        if np.any(np.diff(self.elapsed) <= 0):
            raise InvalidArgument("elapsed axis must be strictly increasing")
        if self.ends.shape[1] == 1:
            if np.any(np.diff(self.ends[:, 0]) <= 0) or np.any(np.diff(self.starts[:, 0]) <= 0):
                raise InvalidArgument("start/end axes must be strictly increasing")
        if np.any(self.values < -1e-12):
            self.flags = self.flags + ("negative-values",)

    @property
    def d(self):
        return self.ends.shape[1]

    def rows(self):
        """(elapsed, start, end, value) tuples in axis order."""
        for e, el in enumerate(self.elapsed):
            for s, st in enumerate(self.starts):
                for k, en in enumerate(self.ends):
                    yield el, st, en, self.values[e, s, k]

    def same_axes(self, other):
        return (self.elapsed.shape == other.elapsed.shape and np.array_equal(self.elapsed, other.elapsed)
                and self.starts.shape == other.starts.shape and np.array_equal(self.starts, other.starts)
                and self.ends.shape == other.ends.shape and np.array_equal(self.ends, other.ends))


# ------------------------------------------------------------ Monte Carlo


def silverman_bandwidth(sample, scale=0.8):
    """scale * Silverman's rule per coordinate (n^{-1/(d+4)} in d > 1)."""
    sample = np.asarray(sample, dtype=float)
    n, d = sample.shape
    sd = sample.std(axis=0, ddof=1)
    iqr = np.subtract(*np.percentile(sample, [75, 25], axis=0)) / 1.349
    spread = np.minimum(sd, np.where(iqr > 0, iqr, sd))
    if d == 1:
        return scale * 0.9 * float(spread[0]) * n ** (-0.2)
    return scale * float(np.mean(spread)) * n ** (-1.0 / (d + 4))


def _innovations(law, rng, size, d):
    if law is None or law.kind == "gaussian":
        return rng.standard_normal((size, d))
    nu = law.M - 1.0
    return rng.standard_t(nu, size=(size, d)) * math.sqrt((nu - 2.0) / nu)


def _euler_paths(cs, x, s, t, steps, n, rng, law=None):
    y = np.broadcast_to(x, (n, cs.dimension)).copy()
    h = (t - s) / steps
    sq = math.sqrt(h)
    for k in range(steps):
        u = s + k * h
        xi = _innovations(law, rng, n, cs.dimension)
        y = y + cs.b(u, y) * h + sq * np.einsum("nij,nj->ni", cs.sigma(u, y), xi)
    return y


def _kde(sample, ends, bw, chunk=4096):
    d = sample.shape[1]
    norm = (2.0 * math.pi * bw * bw) ** (-d / 2.0)
    out = np.zeros(len(ends))
    for a in range(0, len(sample), chunk):
        diff = ends[None, :, :] - sample[a:a + chunk, None, :]
        out += np.exp(-0.5 * np.sum(diff * diff, axis=-1) / (bw * bw)).sum(axis=0)
    return norm * out / len(sample)


@dataclass
class MCResult:
    grid: DensityGrid
    bandwidth: float
    batch_estimates: np.ndarray


def mc_density(target, s, t, x, ends, n_paths=100_000, bandwidth=None, seed=0, steps=200,
               batches=20, threads=1) -> MCResult:
    """Euler Monte Carlo density estimate at ``ends``.

    target is a CoefficientSet (step (t-s)/steps) or a ChainModel (its own
    step h; s, t must be grid times). Batch b draws from the b-th child of
    SeedSequence(seed), so the result does not depend on ``threads``.
    """
    if n_paths < 10_000:
        raise InvalidArgument("mc_density needs at least 1e4 paths")
    if bandwidth is not None and not bandwidth > 0:
        raise InvalidArgument("bandwidth must be positive")
    if isinstance(target, ChainModel):
        cs, law = target.set, target.law
        i, j = round(s / target.h), round(t / target.h)
        if not math.isclose(i * target.h, s, abs_tol=1e-12) or not math.isclose(j * target.h, t, abs_tol=1e-12):
            raise InvalidArgument("chain Monte Carlo needs s, t on the time grid")
        steps = j - i
    else:
        cs, law = target, None
    d = cs.dimension
    x = np.asarray(x, dtype=float).reshape(d)
    ends = np.asarray(ends, dtype=float).reshape(-1, d)
    per = n_paths // batches
    children = np.random.SeedSequence(seed).spawn(batches)

    def run(b):
        rng = np.random.default_rng(children[b])
        return _euler_paths(cs, x, s, t, steps, per, rng, law)

    samples = ordered_map(run, range(batches), threads)
    pooled = np.concatenate(samples)
    bw = silverman_bandwidth(pooled) if bandwidth is None else float(bandwidth)
    est = np.stack(ordered_map(lambda smp: _kde(smp, ends, bw), samples, threads))
    value = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / math.sqrt(batches)
    flags = ()
    if d == 1 and len(ends) > 1 and bw < float(np.min(np.diff(ends[:, 0]))):
        flags = ("bandwidth-below-grid",)
    grid = DensityGrid([t - s], x[None], ends, value[None, None], "mc",
                       scheme=f"euler steps={steps} paths={per * batches} bw={bw:.6g}", seed=seed,
                       stderr=se[None, None], flags=flags)
    return MCResult(grid, bw, est)


# --------------------------------------------------- grid Chapman-Kolmogorov


@dataclass
class CKResult:
    grid: DensityGrid
    masses: np.ndarray


def grid_chapman_kolmogorov(model: ChainModel, i, j, x, ends, nodes=1025, halfwidth=8.0,
                            mass_tol=1e-3) -> CKResult:
    """Exact chain density by p_{k+1}(y) = int p_k(z) pi^h(t_k, z, y) dz (trapezoid, d = 1)."""
    if model.d != 1:
        raise Unsupported("the grid recursion oracle is implemented in d = 1")
    if nodes < 512:
        raise InvalidArgument("grid recursion needs at least 512 nodes")
    if not 0 <= i < j <= model.N:
        raise InvalidArgument("grid recursion needs 0 <= i < j <= N")
    x = float(np.asarray(x, dtype=float).reshape(-1)[0])
    ends = np.asarray(ends, dtype=float).reshape(-1)
    span = model.t(j) - model.t(i)
    half = halfwidth * math.sqrt(model.set.Lambda * span) + model.set.K1 * span
    z = np.linspace(x - half, x + half, nodes)
    w = np.full(nodes, z[1] - z[0])
    w[0] = w[-1] = 0.5 * w[0]
    zc = z[:, None, None]
    masses = []
    if j == i + 1:
        vals = one_step_density(model, i, x, ends[:, None])
    else:
        p = one_step_density(model, i, x, z[:, None])
        masses.append(float(w @ p))
        trans = None
        for k in range(i + 1, j - 1):
            if trans is None or not model.set.time_homogeneous:
                trans = one_step_density(model, k, zc, z[None, :, None])
            p = (w * p) @ trans
            masses.append(float(w @ p))
            if abs(masses[-1] - masses[-2]) > mass_tol:
                raise RefinementRequired(f"grid mass drifted to {masses[-1]:.6f} at step {k + 1}")
        vals = (w * p) @ one_step_density(model, j - 1, zc, ends[None, :, None])
    grid = DensityGrid([span], [[x]], ends, vals[None, None], "grid-ck",
                       scheme=f"trapezoid nodes={nodes} halfwidth={half:.6g}")
    return CKResult(grid, np.asarray(masses))


# --------------------------------------------------- parametrix as grids


def sde_density_grid(cs, s, t, x, ends, R=3, scheme: ConvolutionScheme = ConvolutionScheme()) -> DensityGrid:
    res = density_series(cs, s, t, x, ends, R, scheme)
    return DensityGrid([t - s], np.reshape(x, (1, -1)), res.ys, res.value[None, None], "parametrix-sde",
                       scheme=f"R={R} time_nodes={scheme.time_nodes} L={scheme.space_box_halfwidth:g}")


def chain_density_grid(model: ChainModel, i, j, x, ends, grid: ChainGrid = ChainGrid()) -> DensityGrid:
    res = chain_density_parametrix(model, i, j, x, ends, grid)
    return DensityGrid([model.t(j) - model.t(i)], np.reshape(x, (1, -1)), res.ys, res.value[None, None],
                       "parametrix-chain", scheme=f"N={model.N} law={model.law.label}")


# --------------------------------------------------------------- compare


@dataclass(frozen=True)
class Comparison:
    gap: float
    location: Tuple[float, Tuple[float, ...], Tuple[float, ...]]
    points: int


def weight_values(weight, elapsed, disp):
    d = disp.shape[-1]
    if isinstance(weight, GaussianRef):
        return p_c_eval(weight, elapsed, disp)
    if isinstance(weight, ConcentrationProfile):
        return scaled_profile(weight.r, weight.c, elapsed, disp, weight.d)
    raise InvalidArgument("weight must be a GaussianRef or ConcentrationProfile")


def compare_densities(a: DensityGrid, b: DensityGrid, weight, radius=6.0) -> Comparison:
    """sup |a - b| / weight over grid points with |end - start| <= radius sqrt(elapsed)."""
    if not a.same_axes(b):
        raise InvalidArgument("density grids have different axes")
    best, loc, count = 0.0, None, 0
    for e, el in enumerate(a.elapsed):
        for s, st in enumerate(a.starts):
            disp = a.ends - st
            inside = np.linalg.norm(disp, axis=-1) <= radius * math.sqrt(el)
            if not np.any(inside):
                continue
            wv = weight_values(weight, el, disp[inside])
            ratio = np.abs(a.values[e, s, inside] - b.values[e, s, inside]) / wv
            count += int(inside.sum())
            k = int(np.argmax(ratio))
            if loc is None or ratio[k] > best:
                best = float(ratio[k])
                loc = (float(el), tuple(st.tolist()), tuple(a.ends[inside][k].tolist()))
    if loc is None:
        raise InvalidArgument("no grid point inside the comparison radius")
    return Comparison(best, loc, count)


# -------------------------------------------------------------- rate fit


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    residual: float
    used: int
    dropped: int


def rate_fit(epsilons, gaps) -> RateFit:
    """Least squares of log gap on log eps."""
    eps = np.asarray(epsilons, dtype=float)
    g = np.asarray(gaps, dtype=float)
    if eps.shape != g.shape:
        raise InvalidArgument("epsilons and gaps differ in length")
    keep = (g > 0) & np.isfinite(g)
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"rate_fit dropped {dropped} nonpositive gap(s)", RuntimeWarning, stacklevel=2)
    eps, g = eps[keep], g[keep]
    if len(eps) < 3:
        raise InvalidArgument("rate_fit needs at least 3 positive gaps")
    if eps.max() < 2.0 * eps.min():
        raise InvalidArgument("epsilons must span at least one octave")
    A = np.stack([np.log(eps), np.ones_like(eps)], axis=1)
    coef, *_ = np.linalg.lstsq(A, np.log(g), rcond=None)
    res = np.log(g) - A @ coef
    return RateFit(float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(res * res))), len(eps), dropped)


# ------------------------------------------------------------- stability


@dataclass
class StabilityReport:
    epsilons: List[float]
    delta: List[DeltaMetrics]
    sup_weighted_gap: List[float]
    ratio: List[float]
    fit: RateFit
    q: float
    alpha_q: float
    probe: str = ""
    locations: List[tuple] = field(default_factory=list)

    @property
    def ratio_spread(self):
        return max(self.ratio) / min(self.ratio)

    @property
    def fitted_constant(self):
        return max(self.ratio)


def stability_sweep(family: PerturbationFamily, epsilons: Sequence[float],
                    density: Callable[[CoefficientSet], DensityGrid], weight, q=math.inf,
                    time_grid=(0.0,), space_domain=(-4.0, 4.0), sampler: SamplingPlan = SamplingPlan(),
                    threads=1, probe="") -> StabilityReport:
    """Weighted gaps sup |p - p_eps| / weight and ratios gap / Delta over an eps sweep.

    ``density`` maps a coefficient set to a DensityGrid on fixed axes.
    """
    eps = [float(e) for e in epsilons]
    if not eps:
        raise InvalidArgument("epsilons must be nonempty")
    base_grid = density(family.base)
    pert = ordered_map(lambda e: density(family.at(e)), eps, threads)
    deltas, gaps, ratios, locs = [], [], [], []
    for e, g in zip(eps, pert):
        dm = delta_metrics((family.base, family.at(e)), q, time_grid, space_domain, sampler,
                           family.difference_compact)
        cmp = compare_densities(base_grid, g, weight)
        deltas.append(dm)
        gaps.append(cmp.gap)
        locs.append(cmp.location)
        ratios.append(cmp.gap / dm.delta_total if dm.delta_total > 0 else math.inf)
    fit = rate_fit(eps, gaps)
    return StabilityReport(eps, deltas, gaps, ratios, fit, deltas[0].q, deltas[0].alpha_q, probe, locs)


# ---------------------------------------------------------------- prices


PAYOFFS = {
    "indicator-call": ("1{S > K}, S = exp(y)", lambda s, K: (s > K).astype(float)),
    "bounded-lipschitz": ("min(|S - K|, 1)", lambda s, K: np.minimum(np.abs(s - K), 1.0)),
    "unit": ("1", lambda s, K: np.ones_like(s)),
}


@dataclass(frozen=True)
class PriceSensitivity:
    price_base: float
    price_perturbed: float
    difference: float
    delta_total: float
    bound_integral: float
    ratio: float


def price_sensitivity(family: PerturbationFamily, eps, payoff, t, T, x, strike=1.0, R=3,
                      scheme: ConvolutionScheme = ConvolutionScheme(), nodes=241, halfwidth=8.0,
                      q=math.inf, space_domain=(-4.0, 4.0), sampler: SamplingPlan = SamplingPlan(),
                      tail_tol=1e-8) -> PriceSensitivity:
    """E f(exp X_T) under base and perturbed coefficients (d = 1, X_t = x) and the
    bound side Delta * int f(exp y) p_c(T - t, y - x) dy.

    ratio = |difference| / bound side, the empirical constant of the bound.
    """
    if payoff not in PAYOFFS:
        raise InvalidArgument(f"unknown payoff {payoff!r}")
    f = PAYOFFS[payoff][1]
    base = family.base
    if base.dimension != 1:
        raise Unsupported("price sensitivity is implemented in d = 1")
    # box sized by the weight p_c, whose variance (T - t)/c exceeds the density's
    half = halfwidth * math.sqrt((T - t) / base.c)
    ys = np.linspace(x - half, x + half, nodes)
    w = np.full(nodes, ys[1] - ys[0])
    w[0] = w[-1] = 0.5 * w[0]
    fy = f(np.exp(ys), strike)
    ref = GaussianRef(base.c, 1)
    pc = p_c_eval(ref, T - t, ys - x)
    bound_int = float(w @ (fy * pc))
    edge = max(fy[0] * pc[0], fy[-1] * pc[-1])
    if bound_int > 0 and edge > tail_tol * bound_int:
        raise InvalidArgument("payoff integral does not settle on the truncated domain")
    p0 = density_series(base, t, T, x, ys, R, scheme).value
    pert = family.at(eps)
    p1 = p0 if eps == 0 else density_series(pert, t, T, x, ys, R, scheme).value
    v0, v1 = float(w @ (fy * p0)), float(w @ (fy * p1))
    dm = delta_metrics((base, pert), q, [t], space_domain, sampler, family.difference_compact)
    side = dm.delta_total * bound_int
    diff = v1 - v0
    ratio = abs(diff) / side if side > 0 else (0.0 if diff == 0 else math.inf)
    return PriceSensitivity(v0, v1, diff, dm.delta_total, bound_int, ratio)
