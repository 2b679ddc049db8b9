"""Euler-type Markov chains: one-step laws, frozen chains, the discrete
kernel H^h and the finite parametrix sum.

Chain: Y_{k+1} = Y_k + b(t_k, Y_k) h + sqrt(h) sigma(t_k, Y_k) xi_{k+1}, with
xi iid standard Gaussian or a unit-variance polynomial-tail law (d = 1).
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import EllipticityViolation, EvaluationError, InvalidArgument, RefinementRequired, Unsupported
from .gaussian_core import gaussian_parts, q_r_normalizer
from .special import log_gamma


# ------------------------------------------------------------ innovations


class _Dirac:
    """Zero-elapsed frozen density: the point mass at the start point."""

    def __repr__(self):
        return "DIRAC"


DIRAC = _Dirac()


@dataclass(frozen=True)
class InnovationLaw:
    """kind is "gaussian" or "poly-tail". The poly-tail density is
    c (1 + z^2/(M-3))^{-M/2}: the profile (1 + |z|^2)^{-M/2} rescaled to unit
    variance (a Student t with M - 1 degrees of freedom)."""

    kind: str = "gaussian"
    M: Optional[float] = None
    quad_nodes: int = 1025
    quad_halfwidth: float = 40.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "poly-tail"):
            raise InvalidArgument(f"unknown innovation law {self.kind!r}")
        if self.kind == "poly-tail":
            if self.M is None or self.M <= 8.0:
                # M > 2d + 5 + gamma with d = 1, gamma <= 1
                raise InvalidArgument("poly-tail needs decay order M > 8")

    @property
    def label(self):
        return "gaussian" if self.kind == "gaussian" else f"poly-tail M={self.M:g}"

    def check_dimension(self, d):
        if self.kind == "poly-tail" and d != 1:
            raise Unsupported("poly-tail innovations are implemented in d = 1 only")

    def _log_norm(self):
        nu = self.M - 1.0
        return (log_gamma(0.5 * (nu + 1.0)) - log_gamma(0.5 * nu) - 0.5 * math.log(math.pi * (self.M - 3.0)))

    def pdf(self, w):
        """Density at points w of shape (..., d)."""
        w = np.asarray(w, dtype=float)
        if self.kind == "gaussian":
            d = w.shape[-1]
            return np.exp(-0.5 * np.sum(w * w, axis=-1)) / (2.0 * math.pi) ** (d / 2.0)
        z = w[..., 0]
        return np.exp(self._log_norm()) * (1.0 + z * z / (self.M - 3.0)) ** (-0.5 * self.M)

    def quadrature(self, d=1, gh_nodes=64):
        """Nodes (Q, d) and weights (Q,) with sum w phi(node) ~ E phi(xi).

        Gaussian: probabilists' Gauss-Hermite, tensorised in d = 2.
        Poly-tail: trapezoid on [-W, W], weights renormalised to unit mass and
        nodes rescaled to unit variance.
        """
        if self.kind == "gaussian":
            x, w = np.polynomial.hermite_e.hermegauss(gh_nodes)
            w = w / math.sqrt(2.0 * math.pi)
            if d == 1:
                return x[:, None], w
            grids = np.meshgrid(*([x] * d), indexing="ij")
            wgrids = np.meshgrid(*([w] * d), indexing="ij")
            return np.stack([g.ravel() for g in grids], -1), np.prod(np.stack([g.ravel() for g in wgrids]), 0)
        self.check_dimension(d)
        return _poly_rule(self.M, self.quad_nodes, self.quad_halfwidth)

    def tail_constant(self, grid=None):
        """max f_xi / Q_M over the grid (finite iff the tail is dominated by Q_M)."""
        if self.kind != "poly-tail":
            raise InvalidArgument("tail_constant applies to poly-tail laws")
        z = np.linspace(-self.quad_halfwidth, self.quad_halfwidth, self.quad_nodes) if grid is None else grid
        q = q_r_normalizer(self.M, 1) * (1.0 + np.abs(z)) ** (-self.M)
        return float(np.max(self.pdf(np.asarray(z)[:, None]) / q))


@lru_cache(maxsize=16)
def _poly_rule(M, n, W):
    law = InnovationLaw("poly-tail", M)
    z = np.linspace(-W, W, n)
    w = law.pdf(z[:, None]) * (z[1] - z[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    w = w / w.sum()
    z = z / math.sqrt(np.dot(w, z * z))
    z.setflags(write=False)
    w.setflags(write=False)
    return z[:, None], w


@lru_cache(maxsize=256)
def _nfold_table(M, n, delta):
    """Density of xi_1 + ... + xi_n on the grid delta*Z, by repeated trapezoid
    convolution; returned as a cubic spline in the standardised variable."""
    law = InnovationLaw("poly-tail", M)
    base_half = 40.0
    kb = int(round(base_half / delta))
    zb = delta * np.arange(-kb, kb + 1)
    fb = law.pdf(zb[:, None])
    cur = fb
    for _ in range(n - 1):
        cur = np.convolve(cur, fb) * delta
        half = (len(cur) - 1) // 2
        keep = int(round((base_half + 12.0 * math.sqrt(n)) / delta))
        if half > keep:
            cur = cur[half - keep:half + keep + 1]
    half = (len(cur) - 1) // 2
    z = delta * np.arange(-half, half + 1)
    return z, cur, CubicSpline(z, cur)


def nfold_density(law: InnovationLaw, n, u, delta=1.0 / 16):
    """Density of the sum of n iid innovations at standardised points u (d = 1)."""
    u = np.asarray(u, dtype=float)
    if n == 1:
        return law.pdf(u[..., None])
    if law.kind == "gaussian":
        return np.exp(-0.5 * u * u / n) / math.sqrt(2.0 * math.pi * n)
    z, vals, spl = _nfold_table(law.M, n, delta)
    out = spl(u)
    out[np.abs(u) > z[-1]] = 0.0
    return out


# ------------------------------------------------------------------ model


@dataclass(frozen=True)
class ChainModel:
    set: object
    T: float
    N: int
    law: InnovationLaw = InnovationLaw()

    def __post_init__(self):
        if self.N < 1 or not self.T > 0:
            raise InvalidArgument("chain needs N >= 1 and T > 0")
        self.law.check_dimension(self.set.dimension)

    @property
    def h(self):
        return self.T / self.N

    @property
    def d(self):
        return self.set.dimension

    def t(self, k):
        return k * self.h

    @property
    def table_delta(self):
        # spacing of the n-fold tables in standardised units; K2 * delta <= 1/8
        # keeps the physical spacing below sqrt(h)/8
        k = 4
        while self.set.K2 * 2.0 ** -k > 0.125:
            k += 1
        return 2.0 ** -k


@dataclass(frozen=True)
class OneStepTransition:
    model: ChainModel
    k: int
    x: np.ndarray

    def __call__(self, w):
        cs, h = self.model.set, self.model.h
        x = self.x[None, :]
        sig = cs.sigma(self.model.t(self.k), x)[0]
        return self.x + cs.b(self.model.t(self.k), x)[0] * h + math.sqrt(h) * np.asarray(w, float) @ sig.T

    @property
    def jacobian(self):
        sig = self.model.set.sigma(self.model.t(self.k), self.x[None, :])[0]
        return float(np.linalg.det(sig)) * self.model.h ** (self.model.d / 2.0)


def _pts(v, d):
    arr = np.asarray(v, dtype=float)
    if d == 1 and (arr.ndim == 0 or arr.shape[-1] != 1):
        arr = arr[..., None]
    return arr


def _check_index(model, i, j=None):
    if i < 0 or (j is not None and j > model.N) or (j is None and i >= model.N):
        raise InvalidArgument("time index outside the chain horizon")


def _step_density(law, sig, disp, h):
    """f_xi(sig^-1 disp / sqrt h) / (|det sig| h^{d/2}), broadcast over leading axes."""
    d = disp.shape[-1]
    if d == 1:
        s = sig[..., 0, 0]
        if np.any(s == 0):
            raise EllipticityViolation("singular diffusion coefficient")
        scale = np.abs(s) * math.sqrt(h)
        return law.pdf((disp[..., 0] / scale)[..., None]) / scale
    det = np.linalg.det(sig)
    if np.any(det == 0):
        raise EllipticityViolation("singular diffusion coefficient")
    w = np.linalg.solve(sig, disp[..., None])[..., 0] / math.sqrt(h)
    return law.pdf(w) / (np.abs(det) * h ** (d / 2.0))


def one_step_density(model: ChainModel, k, x, y, frozen_at=None, drift=True):
    """pi^h(t_k, x, y). frozen_at switches sigma to that point; drift=False drops b."""
    _check_index(model, k)
    cs, h, d = model.set, model.h, model.d
    x, y = np.broadcast_arrays(_pts(x, d), _pts(y, d))
    t = model.t(k)
    freeze = x if frozen_at is None else np.broadcast_to(_pts(frozen_at, d), x.shape)
    sig = cs.sigma(t, freeze)
    disp = y - x
    if drift:
        disp = disp - cs.b(t, x) * h
    return _step_density(model.law, sig, disp, h)


def _frozen_cov(model, i, j, y):
    """h * sum_{k=i}^{j-1} a(t_k, y)."""
    cs = model.set
    n = j - i
    if n == 0:
        return np.zeros(y.shape + (y.shape[-1],))
    if cs.time_homogeneous:
        return model.h * (n * cs.a(0.0, y))
    acc = cs.a(model.t(i), y)
    for k in range(i + 1, j):
        acc = acc + cs.a(model.t(k), y)
    return model.h * acc


def frozen_chain_density(model: ChainModel, i, j, x, y):
    """p~^h(t_i, t_j, x, y) for the chain frozen at y; DIRAC when i == j."""
    if i == j:
        return DIRAC
    if not 0 <= i < j <= model.N:
        raise InvalidArgument("frozen_chain_density needs 0 <= i < j <= N")
    d = model.d
    x, y = np.broadcast_arrays(_pts(x, d), _pts(y, d))
    if model.law.kind == "gaussian":
        return gaussian_parts(_frozen_cov(model, i, j, y), y - x)[0]
    if j == i + 1:
        return one_step_density(model, i, x, y, frozen_at=y, drift=False)
    if not model.set.time_homogeneous:
        raise Unsupported("poly-tail frozen chains need time-homogeneous coefficients")
    scale = np.abs(model.set.sigma(0.0, y)[..., 0, 0]) * math.sqrt(model.h)
    return nfold_density(model.law, j - i, (y - x)[..., 0] / scale, model.table_delta) / scale


def _frozen_at_start(model, i, j, x, zs):
    """Frozen chain density with sigma frozen at the start point x; a probability
    density in the end point, so its grid mass measures grid resolution."""
    xs = np.broadcast_to(x, zs.shape)
    if model.law.kind == "gaussian":
        return gaussian_parts(_frozen_cov(model, i, j, xs), zs - xs)[0]
    scale = abs(float(model.set.sigma(model.t(i), x[None])[0, 0, 0])) * math.sqrt(model.h)
    return nfold_density(model.law, j - i, (zs - xs)[..., 0] / scale, model.table_delta) / scale


def generator_apply(model: ChainModel, k, phi, x, frozen_at=None, gh_nodes=64):
    """L^h_{t_k} phi(x) = h^-1 E[phi(Y_{k+1}) - phi(x)] given Y_k = x.

    frozen_at: use the driftless step with sigma frozen at that point.
    """
    _check_index(model, k)
    cs, h, d = model.set, model.h, model.d
    x = _pts(x, d).reshape(d)
    nodes, w = model.law.quadrature(d, gh_nodes)
    t = model.t(k)
    if frozen_at is None:
        sig = cs.sigma(t, x[None])[0]
        mean = x + cs.b(t, x[None])[0] * h
    else:
        sig = cs.sigma(t, _pts(frozen_at, d).reshape(1, d))[0]
        mean = x
    pts = mean + math.sqrt(h) * nodes @ sig.T
    vals = np.asarray(phi(pts), dtype=float)
    if not np.all(np.isfinite(vals)):
        q = int(np.argmax(~np.isfinite(vals)))
        raise EvaluationError(f"non-finite test function value at {pts[q].tolist()}", point=pts[q])
    base = float(np.asarray(phi(x[None]), dtype=float).reshape(-1)[0])
    return (float(np.dot(w, vals)) - base) / h


def _hh_quadrature(model, k, m, z, y, nodes, w):
    """H^h via innovation quadrature: h^-1 E[p~(t_{k+1}, t_m, Z, y) - p~(t_{k+1}, t_m, Z~, y)]
    with Z the true step from z and Z~ the frozen driftless one. z, y broadcast (..., d)."""
    cs, h, d = model.set, model.h, model.d
    t = model.t(k)
    sq = math.sqrt(h)
    steps = sq * nodes  # (Q, d)
    sig_z = cs.sigma(t, z)
    sig_y = cs.sigma(t, y)
    mean = z + cs.b(t, z) * h
    zq = mean[..., None, :] + np.einsum("...ij,qj->...qi", sig_z, steps)
    zt = z[..., None, :] + np.einsum("...ij,qj->...qi", sig_y, steps)
    yq = y[..., None, :]
    f1 = frozen_chain_density(model, k + 1, m, zq, np.broadcast_to(yq, zq.shape))
    f2 = frozen_chain_density(model, k + 1, m, zt, np.broadcast_to(yq, zt.shape))
    return (f1 - f2) @ w / h


def kernel_Hh(model: ChainModel, i, j, x, y, method="auto"):
    """H^h(t_i, t_j, x, y) = (L^h_{t_i} - L~^{h,y}_{t_i}) p~^h(t_i + h, t_j, ., y)(x).

    method "closed" (Gaussian law): the generator images of a Gaussian are
    Gaussians, h^-1 [g_{C + h a(x)}(y - x - b h) - g_{C + h a(y)}(y - x)] with
    C = h sum_{k=i+1}^{j-1} a(t_k, y). method "quadrature": expectation over
    the innovation rule (Gauss-Hermite or trapezoid). "auto" picks closed
    form when available; j = i+1 always uses the one-step difference.
    """
    if not 0 <= i < j <= model.N:
        raise InvalidArgument("kernel_Hh needs 0 <= i < j <= N")
    cs, h, d = model.set, model.h, model.d
    x, y = np.broadcast_arrays(_pts(x, d), _pts(y, d))
    if model.law.kind == "gaussian" and method in ("auto", "closed"):
        t = model.t(i)
        C = _frozen_cov(model, i + 1, j, y)
        g1 = gaussian_parts(C + h * cs.a(t, x), y - x - cs.b(t, x) * h)[0]
        g2 = gaussian_parts(C + h * cs.a(t, y), y - x)[0]
        return (g1 - g2) / h
    if method == "closed":
        raise InvalidArgument("closed-form H^h needs the Gaussian law")
    if j == i + 1:
        return (one_step_density(model, i, x, y) - frozen_chain_density(model, i, j, x, y)) / h
    nodes, w = model.law.quadrature(d)
    return _hh_quadrature(model, i, j, x, y, nodes, w)


# ------------------------------------------------------------ convolution


@dataclass(frozen=True)
class ChainGrid:
    """Spatial grid around x: halfwidth L * sqrt(Lambda (t_j - t_i)), trapezoid."""

    halfwidth: float = 8.0
    nodes_per_axis: Optional[int] = None
    # innovation rule for H^h matrices under the poly-tail law
    quad_nodes: int = 129
    quad_halfwidth: float = 24.0

    def per_axis(self, d, kind="gaussian"):
        if self.nodes_per_axis is not None:
            return self.nodes_per_axis
        if kind != "gaussian":
            return 257
        return 513 if d == 1 else 41

    def build(self, model, i, j, x):
        d = model.d
        n = self.per_axis(d, model.law.kind)
        half = self.halfwidth * math.sqrt(model.set.Lambda * (model.t(j) - model.t(i)))
        axis = np.linspace(-half, half, n)
        w = np.full(n, axis[1] - axis[0])
        w[0] = w[-1] = 0.5 * w[0]
        if d == 1:
            return x + axis[:, None], w
        mesh = np.meshgrid(*([axis] * d), indexing="ij")
        wm = np.meshgrid(*([w] * d), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], -1)
        return x + pts, np.prod(np.stack([m.ravel() for m in wm]), 0)


def discrete_convolve(model: ChainModel, f, g, i, j, x, y, grid: ChainGrid = ChainGrid()):
    """(f (x)_h g)(t_i, t_j, x, y) = sum_{k=i}^{j-1} h int f(t_i, t_k, x, z) g(t_k, t_j, z, y) dz.

    f(i, k, x, zs) and g(k, j, zs, y) take point arrays; f returning DIRAC at
    k = i collapses that term to h g(t_i, t_j, x, y).
    """
    if not i < j:
        raise InvalidArgument("discrete_convolve needs i < j")
    d = model.d
    x = _pts(x, d).reshape(d)
    y = _pts(y, d).reshape(d)
    zs, wz = grid.build(model, i, j, x)
    total = 0.0
    for k in range(i, j):
        fk = f(i, k, x, zs)
        if fk is DIRAC:
            total += model.h * float(np.asarray(g(i, j, x[None], y[None])).reshape(-1)[0])
        else:
            total += model.h * float(np.dot(wz, np.asarray(fk) * np.asarray(g(k, j, zs, y[None]))))
    return total


@dataclass
class ChainSeries:
    value: np.ndarray
    terms: np.ndarray
    ys: np.ndarray
    mass0: float


class _HhMatrices:
    """H^h(t_k, t_m, z, y) on (source points x targets); cached by lag when
    the coefficients are time-homogeneous."""

    def __init__(self, model, grid):
        self.model = model
        self.cache = {}
        self.homog = model.set.time_homogeneous
        if model.law.kind != "gaussian":
            self.rule = _poly_rule(model.law.M, grid.quad_nodes, grid.quad_halfwidth)

    def __call__(self, k, m, src, tgt, tag):
        key = (m - k, tag) if self.homog else None
        if key is not None and key in self.cache:
            return self.cache[key]
        model = self.model
        z = src[:, None, :]
        y = tgt[None, :, :]
        if model.law.kind == "gaussian" or m == k + 1:
            out = kernel_Hh(model, k, m, z, y)
        else:
            out = np.empty((len(src), len(tgt)))
            nodes, w = self.rule
            step = max(1, 2 ** 22 // (len(tgt) * len(w)))
            for a in range(0, len(src), step):
                zz, yy = np.broadcast_arrays(src[a:a + step, None, :], y)
                out[a:a + step] = _hh_quadrature(model, k, m, zz, yy, nodes, w)
        if key is not None:
            self.cache[key] = out
        return out


def chain_density_parametrix(model: ChainModel, i, j, x, ys, grid: ChainGrid = ChainGrid(),
                             mass_tol=1e-3) -> ChainSeries:
    """Finite parametrix sum p^h = sum_{r=0}^{j-i} p~^h (x)_h H^{h,(r)}.

    phi_r(m, .) := (p~^h (x)_h H^{h,(r)})(t_i, t_{i+m}, x, .) is marched in m on
    the spatial grid; the last step is evaluated at ys. Only p~^h carries the
    Dirac convention at zero elapsed time, so phi_r(m) = 0 for r > m.
    """
    if not 0 <= i < j <= model.N:
        raise InvalidArgument("chain_density_parametrix needs 0 <= i < j <= N")
    d, h = model.d, model.h
    x = _pts(x, d).reshape(d)
    ys = _pts(ys, d).reshape(-1, d)
    n = j - i
    zs, wz = grid.build(model, i, j, x)
    mass0 = 1.0
    for m in range(1, n + 1):
        mass = float(np.dot(wz, _frozen_at_start(model, i, i + m, x, zs)))
        if abs(mass - 1.0) > mass_tol:
            raise RefinementRequired(f"frozen density mass {mass:.6f} at step {m}; refine the chain grid")
        if m == n:
            mass0 = mass
    H = _HhMatrices(model, grid)
    # phi[r][m] on zs (m < n) or ys (m = n)
    phi = [[None] * (n + 1) for _ in range(n + 1)]
    for m in range(1, n + 1):
        tgt, tag = (zs, "grid") if m < n else (ys, "out")
        phi[0][m] = frozen_chain_density(model, i, i + m, x[None], tgt)
        phi[1][m] = h * kernel_Hh(model, i, i + m, x[None], tgt)
        for r in range(2, m + 1):
            phi[r][m] = np.zeros(len(tgt))
        for k in range(1, m):
            hm = H(i + k, i + m, zs, tgt, tag)
            for r in range(1, k + 2):
                phi[r][m] += h * ((wz * phi[r - 1][k]) @ hm)
    terms = np.stack([phi[r][n] for r in range(n + 1)])
    if not np.all(np.isfinite(terms)):
        raise EvaluationError("non-finite chain parametrix term", point=None)
    return ChainSeries(terms.sum(axis=0), terms, ys, mass0)
