"""Parametrix expansion of diffusion transition densities.

The density is the sum over r of the iterated time-space convolutions
p~ (x) H^(r), where p~ is the Gaussian density with coefficients frozen at
the terminal point and H = (L - L~) p~ is the parametrix kernel. Iterated
terms are built by storing the previous order on a (time, space) grid and
convolving once more with H, instead of nesting 2r quadratures.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from .errors import EvaluationError, InvalidArgument, TruncationFailure
from .gaussian_core import GaussianRef, gaussian_parts, integrated_diffusion, p_c_eval
from .special import log_gamma


def as_points(v, d):
    """Coerce scalars / flat arrays to an (n, d) array of points."""
    arr = np.asarray(v, dtype=float)
    if d == 1 and (arr.ndim == 0 or arr.shape[-1] != 1):
        return arr.reshape(-1, 1)
    return arr.reshape(-1, d)


@dataclass(frozen=True)
class ConvolutionScheme:
    """Discretisation of the time-space convolutions.

    time_nodes are split over two panels graded toward both endpoints;
    time_grading defaults to 2/gamma. Spatial boxes have halfwidth
    space_box_halfwidth in units of the narrower factor's standard deviation.
    materialize_nodes is the number of stored time slices per order.
    """

    time_nodes: int = 32
    time_grading: Optional[float] = None
    space_box_halfwidth: float = 8.0
    space_nodes_per_axis: Optional[int] = None
    materialize_nodes: int = 32

    def __post_init__(self):
        if self.time_nodes < 8:
            raise InvalidArgument("time_nodes must be >= 8")
        if self.time_grading is not None and self.time_grading < 1:
            raise InvalidArgument("time_grading must be >= 1")
        if self.space_box_halfwidth < 6:
            raise InvalidArgument("space_box_halfwidth must be >= 6")
        if self.materialize_nodes < 4:
            raise InvalidArgument("materialize_nodes must be >= 4")

    def grading(self, gamma=1.0):
        return self.time_grading if self.time_grading is not None else 2.0 / gamma

    def nodes_per_axis(self, d):
        if self.space_nodes_per_axis is not None:
            return self.space_nodes_per_axis
        return 129 if d == 1 else 65

    def refined(self):
        """Scheme with doubled resolution in every direction."""
        return ConvolutionScheme(
            time_nodes=2 * self.time_nodes,
            time_grading=self.time_grading,
            space_box_halfwidth=self.space_box_halfwidth,
            space_nodes_per_axis=(self.space_nodes_per_axis or 0) * 2 - 1 if self.space_nodes_per_axis else None,
            materialize_nodes=2 * self.materialize_nodes,
        )


def graded_time_rule(s, t, n, grading):
    """Nodes/weights on (s, t): two Gauss-Legendre panels, each graded toward
    its outer endpoint with exponent ``grading``."""
    half = max(n // 2, 1)
    g, gw = np.polynomial.legendre.leggauss(half)
    theta = 0.5 * (g + 1.0)
    wt = 0.5 * gw
    m = 0.5 * (s + t)
    left = s + (m - s) * theta ** grading
    lw = (m - s) * grading * theta ** (grading - 1.0) * wt
    right = t - (t - m) * (1.0 - theta) ** grading
    rw = (t - m) * grading * (1.0 - theta) ** (grading - 1.0) * wt
    return np.concatenate([left, right[::-1]]), np.concatenate([lw, rw[::-1]])


def _scaled_grid(d, n, L):
    axis = np.linspace(-L, L, n)
    w = np.full(n, axis[1] - axis[0])
    w[0] = w[-1] = 0.5 * w[0]
    if d == 1:
        return axis, axis[:, None], w
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    wm = np.meshgrid(*([w] * d), indexing="ij")
    return axis, np.stack([m.ravel() for m in mesh], -1), np.prod(np.stack([m.ravel() for m in wm]), 0)


def _h_values(cs, u, z, y, cov, a_y=None):
    """H(u, t, z, y) given cov = Sigma(u, t, y); z, y broadcast over (..., d)."""
    a_z = cs.a(u, z)
    b_z = cs.b(u, z)
    if a_y is None:
        a_y = cs.a(u, y)
    diff = y - z
    if cs.dimension == 1:
        var = cov[..., 0, 0]
        sol = diff[..., 0] / var
        dens = np.exp(-0.5 * diff[..., 0] * sol) / np.sqrt(2.0 * math.pi * var)
        da = a_z[..., 0, 0] - a_y[..., 0, 0]
        return (0.5 * da * (sol * sol - 1.0 / var) + b_z[..., 0] * sol) * dens
    dens, sol = gaussian_parts(cov, diff)
    inv = np.linalg.inv(cov)
    hess = sol[..., :, None] * sol[..., None, :] - inv
    da = a_z - a_y
    tr = np.einsum("...ij,...ji->...", da, hess)
    return (0.5 * tr + np.einsum("...i,...i->...", b_z, sol)) * dens


def kernel_H(cs, s, t, z, y):
    """Parametrix kernel (L_s - L~_s^y) p~(s, t, z, y), vectorised over z, y."""
    if not s < t:
        raise InvalidArgument("kernel_H needs s < t")
    d = cs.dimension
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if d == 1 and (z.ndim == 0 or z.shape[-1] != 1):
        z = z[..., None]
    if d == 1 and (y.ndim == 0 or y.shape[-1] != 1):
        y = y[..., None]
    z, y = np.broadcast_arrays(z, y)
    cov, _ = integrated_diffusion(cs, s, t, y)
    return _h_values(cs, s, z, y, cov)


def frozen_kernel(cs):
    """p~(s, t, x, y) as a callable vectorised over its last two arguments."""

    def p_tilde(s, t, x, y):
        x = as_points(x, cs.dimension) if np.ndim(x) <= 1 else np.asarray(x, float)
        y = as_points(y, cs.dimension) if np.ndim(y) <= 1 else np.asarray(y, float)
        x, y = np.broadcast_arrays(x, y)
        cov, _ = integrated_diffusion(cs, s, t, y)
        return gaussian_parts(cov, y - x)[0]

    return p_tilde


def parametrix_kernel(cs):
    """H(s, t, z, y) as a callable with the same convention as ``frozen_kernel``."""

    def h(s, t, z, y):
        z = as_points(z, cs.dimension) if np.ndim(z) <= 1 else np.asarray(z, float)
        y = as_points(y, cs.dimension) if np.ndim(y) <= 1 else np.asarray(y, float)
        z, y = np.broadcast_arrays(z, y)
        return kernel_H(cs, s, t, z, y)

    return h


def timespace_convolve(f, g, s, t, x, y, scheme: ConvolutionScheme = ConvolutionScheme(),
                       d=1, spread=1.0, gamma=1.0):
    """(f (x) g)(s, t, x, y) = int_s^t du int dz f(s, u, x, z) g(u, t, z, y).

    f and g are callables vectorised over z given as (n, d). Both are assumed
    to concentrate like Gaussians of variance spread^2 times the elapsed time
    around x and y respectively; at every time node the spatial box is
    centred on the product of the two and sized by the narrower one.
    """
    if not s < t:
        raise InvalidArgument("timespace_convolve needs s < t")
    x = as_points(x, d)[0]
    y = as_points(y, d)[0]
    L = scheme.space_box_halfwidth
    _, zeta, wq = _scaled_grid(d, scheme.nodes_per_axis(d), L)
    us, uw = graded_time_rule(s, t, scheme.time_nodes, scheme.grading(gamma))
    total = 0.0
    for u, wu in zip(us, uw):
        v1 = spread ** 2 * (u - s)
        v2 = spread ** 2 * (t - u)
        centre = (v2 * x + v1 * y) / (v1 + v2)
        width = math.sqrt(min(v1, v2))
        z = centre + width * zeta
        vals = np.asarray(f(s, u, x, z), dtype=float) * np.asarray(g(u, t, z, y), dtype=float)
        if not np.all(np.isfinite(vals)):
            k = int(np.argmax(~np.isfinite(vals)))
            raise EvaluationError(f"non-finite integrand at u={u!r}, z={z[k].tolist()}", point=(u, z[k]))
        total += wu * width ** d * float(np.dot(wq, vals))
    return total


@dataclass
class SeriesResult:
    value: np.ndarray
    terms: np.ndarray
    ys: np.ndarray
    scheme: ConvolutionScheme = field(default_factory=ConvolutionScheme)


class _SeriesEngine:
    """Stores order-r terms phi_r(v, z) = (p~ (x) H^(r))(s, v, x, z) on a grid
    uniform in w = ((v - s)/(t - s))^(gamma/2) and in the scaled offset
    zeta = (z - x) / sqrt(Lambda (v - s))."""

    def __init__(self, cs, s, t, x, scheme):
        self.cs, self.s, self.t, self.x = cs, float(s), float(t), x
        self.d = d = cs.dimension
        self.scheme = scheme
        self.L = scheme.space_box_halfwidth
        self.axis, self.zeta, self.wq = _scaled_grid(d, scheme.nodes_per_axis(d), self.L)
        self.lam = cs.Lambda
        self.grading = scheme.grading(cs.gamma)
        M = scheme.materialize_nodes
        self.w_nodes = np.linspace(0.0, 1.0, M + 1)
        self.taus = self.s + (self.t - self.s) * self.w_nodes[1:] ** (2.0 / cs.gamma)

    def _w(self, v):
        return ((v - self.s) / (self.t - self.s)) ** (self.cs.gamma / 2.0)

    def phi0(self, v, z):
        cov, _ = integrated_diffusion(self.cs, self.s, v, z)
        return gaussian_parts(cov, z - self.x)[0]

    def materialize(self, prev):
        """Scaled grid values Psi[j, q] = (Lambda (tau_j - s))^{d/2} phi(tau_j, x + ...)."""
        rows = [np.zeros(len(self.zeta))]
        for tau in self.taus:
            sig = math.sqrt(self.lam * (tau - self.s))
            outs = self.x + sig * self.zeta
            rows.append(sig ** self.d * self.level(prev, tau, outs))
        return CubicSpline(self.w_nodes, np.stack(rows), axis=0)

    def _interp_space(self, psi_v):
        if self.d == 1:
            spl = CubicSpline(self.axis, psi_v)

            def ev(zeta):
                out = spl(zeta[..., 0])
                out[np.abs(zeta[..., 0]) > self.L] = 0.0
                return out
            return ev
        n = len(self.axis)
        rgi = RegularGridInterpolator((self.axis,) * self.d, psi_v.reshape((n,) * self.d),
                                      method="cubic", bounds_error=False, fill_value=0.0)
        return lambda zeta: rgi(zeta.reshape(-1, self.d)).reshape(zeta.shape[:-1])

    def level(self, prev, tau, outs):
        """int_s^tau dv int dz phi_prev(v, z) H(v, tau, z, y) for y in outs."""
        cs, s, x, d = self.cs, self.s, self.x, self.d
        vs, vw = graded_time_rule(s, tau, self.scheme.time_nodes, self.grading)
        acc = np.zeros(len(outs))
        for v, wv in zip(vs, vw):
            cov, _ = integrated_diffusion(cs, v, tau, outs)
            a_y = cs.a(v, outs)
            var_phi = self.lam * (v - s)
            var_h = self.lam * (tau - v)
            psi_v = None if prev is None else prev(self._w(v))
            if var_phi <= var_h:
                sig = math.sqrt(var_phi)
                z = x + sig * self.zeta
                if prev is None:
                    weights = self.phi0(v, z) * sig ** d * self.wq
                else:
                    weights = psi_v * self.wq
                hmat = _h_values(cs, v, z[None, :, :], outs[:, None, :], cov[:, None], a_y[:, None])
                contrib = hmat @ weights
            else:
                sig_h = math.sqrt(var_h)
                centre = (var_h * x + var_phi * outs) / (var_phi + var_h)
                z = centre[:, None, :] + sig_h * self.zeta[None, :, :]
                if prev is None:
                    phi = self.phi0(v, z)
                else:
                    sig = math.sqrt(var_phi)
                    phi = self._interp_space(psi_v)((z - x) / sig) / sig ** d
                hmat = _h_values(cs, v, z, outs[:, None, :], cov[:, None], a_y[:, None])
                contrib = (hmat * phi) @ self.wq * sig_h ** d
            if not np.all(np.isfinite(contrib)):
                raise EvaluationError(f"non-finite convolution value at u={v!r}", point=(v, None))
            acc += wv * contrib
        return acc


MAX_ORDER = 8


def density_series(cs, s, t, x, y, R=3, scheme: ConvolutionScheme = ConvolutionScheme()) -> SeriesResult:
    """Truncated parametrix series sum_{r<=R} (p~ (x) H^(r))(s, t, x, y).

    ``y`` may hold several end points; every order is returned in ``terms``.
    """
    if R < 0:
        raise InvalidArgument("truncation order must be >= 0")
    if R > MAX_ORDER:
        raise InvalidArgument(f"truncation order {R} exceeds the cost guard {MAX_ORDER}")
    if not s < t:
        raise InvalidArgument("density_series needs s < t")
    d = cs.dimension
    x = as_points(x, d)[0]
    ys = as_points(y, d)
    cov, _ = integrated_diffusion(cs, s, t, ys)
    terms = [gaussian_parts(cov, ys - x)[0]]
    if R > 0:
        eng = _SeriesEngine(cs, s, t, x, scheme)
        prev = None
        for r in range(1, R + 1):
            terms.append(eng.level(prev, t, ys))
            if r < R:
                prev = eng.materialize(prev)
    terms = np.stack(terms)
    return SeriesResult(value=terms.sum(axis=0), terms=terms, ys=ys, scheme=scheme)


# --------------------------------------------------------------- tail bound


@dataclass(frozen=True)
class TailBound:
    """term_bounds[r] = (k c1)^{r+1} Gamma(gamma/2)^r / Gamma(1 + r gamma/2) (t-s)^{r gamma/2},
    with k = max(1, T^{(1-gamma)/2}) for the final horizon T (default t - s)."""

    c1: float
    gamma: float
    horizon: float
    term_bounds: Tuple[float, ...]
    horizon_factor: float = 1.0

    @classmethod
    def build(cls, c1, gamma, horizon, final_horizon=None, count=128):
        T = horizon if final_horizon is None else final_horizon
        k = max(1.0, T ** ((1.0 - gamma) / 2.0))
        if c1 < 0:
            raise InvalidArgument("c1 must be nonnegative")
        if c1 == 0:
            return cls(c1, gamma, horizon, (0.0,) * count, k)
        lg = log_gamma(gamma / 2.0)

        def log_term(r):
            return ((r + 1) * math.log(k * c1) + r * lg - log_gamma(1.0 + r * gamma / 2.0)
                    + r * gamma / 2.0 * math.log(horizon))

        # extend past ``count`` until the term ratio settles below 1/2, so the
        # geometric remainder in ``tail`` applies (ratios decrease in r)
        logs = [log_term(r) for r in range(count)]
        while logs[-1] - logs[-2] > -math.log(2.0) and len(logs) < 1_000_000:
            logs.extend(log_term(r) for r in range(len(logs), 2 * len(logs)))
        return cls(c1, gamma, horizon, tuple(math.exp(v) if v < 700.0 else math.inf for v in logs), k)

    def tail(self, R):
        """Bound on sum_{r > R} term_bounds[r]: explicit sum plus a geometric
        remainder once the term ratio is below one."""
        b = self.term_bounds
        K = len(b) - 1
        if R >= K:
            return 0.0
        ratio = b[K] / b[K - 1] if b[K - 1] > 0 else 0.0
        if not ratio < 1.0:
            return math.inf
        return math.fsum(b[R + 1:K + 1]) + b[K] * ratio / (1.0 - ratio)


def truncation_order(bound: TailBound, tol, cap=32):
    """Smallest R with bound.tail(R) <= tol."""
    if not tol > 0:
        raise InvalidArgument("tolerance must be positive")
    tail = math.inf
    for R in range(cap + 1):
        tail = bound.tail(R)
        if tail <= tol:
            return R
    raise TruncationFailure(f"tail {tail:.3e} still above {tol:.3e} at R={cap}", achieved_tail=tail)


# ------------------------------------------------------------------ audits


@dataclass(frozen=True)
class KernelAudit:
    c1: float
    location: Tuple[float, ...]
    finite: bool
    grid_size: int


def kernel_audit_grid(cs, t, elapsed, offsets, anchors):
    """(s, t, z, y) rows with s = t - elapsed, y in anchors, z = y + sqrt(Lambda*elapsed)*offset."""
    rows = []
    for e in np.atleast_1d(elapsed):
        for y in np.atleast_1d(anchors):
            for o in np.atleast_1d(offsets):
                rows.append((t - e, t, y + math.sqrt(cs.Lambda * e) * o, y))
    return np.asarray(rows, dtype=float)


def kernel_bound_audit(cs, grid, final_horizon=None) -> KernelAudit:
    """Fitted c1 = max |H| (t-s)^{1-gamma/2} / (k p_c(t-s, y-z)) over grid rows (s, t, z, y),
    in d = 1; k = max(1, T^{(1-gamma)/2}), c = (2 Lambda)^-1."""
    grid = np.asarray(grid, dtype=float)
    ref = GaussianRef(cs.c, cs.dimension)
    best, where = 0.0, tuple(grid[0])
    for s, t, z, y in grid:
        T = (t - s) if final_horizon is None else final_horizon
        k = max(1.0, T ** ((1.0 - cs.gamma) / 2.0))
        h = float(kernel_H(cs, s, t, z, y))
        val = abs(h) * (t - s) ** (1.0 - cs.gamma / 2.0) / (k * float(p_c_eval(ref, t - s, y - z)))
        if val > best:
            best, where = val, (s, t, z, y)
    return KernelAudit(best, where, math.isfinite(best), len(grid))


@dataclass(frozen=True)
class UpperAudit:
    ratio: float
    location: float
    min_ratio_at_mode: float
    finite: bool


def gaussian_upper_audit(cs, s, t, x, ys, R=4, scheme: ConvolutionScheme = ConvolutionScheme(),
                         series: Optional[SeriesResult] = None) -> UpperAudit:
    """sup over ys of p(s, t, x, y) / p_c(t - s, y - x) with c = (2 Lambda)^-1."""
    if series is None:
        series = density_series(cs, s, t, x, ys, R, scheme)
    x = as_points(x, cs.dimension)[0]
    disp = series.ys - x
    ref = GaussianRef(cs.c, cs.dimension)
    ratio = series.value / p_c_eval(ref, t - s, disp)
    k = int(np.argmax(ratio))
    mode = int(np.argmax(series.value))
    return UpperAudit(float(ratio[k]), float(series.ys[k, 0]), float(ratio[mode]),
                      bool(np.all(np.isfinite(ratio))))
