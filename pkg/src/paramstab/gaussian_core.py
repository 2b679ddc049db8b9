"""Frozen Gaussian densities, their x-derivatives, the reference Gaussian p_c
and the polynomial concentration profiles Q_r."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import DivergentProfile, EllipticityViolation, InvalidArgument


@dataclass(frozen=True)
class FrozenCovariance:
    s: float
    t: float
    y: np.ndarray
    matrix: np.ndarray
    quadrature_nodes: int

    @property
    def d(self):
        return self.matrix.shape[-1]


def _simpson(values, h):
    # composite Simpson along axis 0 (odd number of nodes)
    w = np.ones(values.shape[0])
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return np.tensordot(w, values, axes=(0, 0)) * h / 3.0


def integrated_diffusion(cs, s, t, y, nodes=33, rtol=1e-10, max_nodes=4097):
    """Integral of a(u, y) over u in [s, t], vectorised over y of shape (..., d).

    Composite Simpson with node doubling until the relative change drops
    below ``rtol``. Returns (matrix of shape (..., d, d), nodes used).
    """
    y = np.asarray(y, dtype=float)
    s = float(s)
    t = float(t)
    if cs.time_homogeneous:
        return (t - s) * cs.a(s, y), 1
    n = nodes if nodes % 2 else nodes + 1
    prev = None
    while True:
        u = np.linspace(s, t, n)
        vals = np.stack([cs.a(ui, y) for ui in u])
        cur = _simpson(vals, (t - s) / (n - 1))
        if prev is not None:
            scale = max(np.max(np.abs(cur)), 1e-300)
            if np.max(np.abs(cur - prev)) <= rtol * scale or n >= max_nodes:
                return cur, n
        prev = cur
        n = 2 * n - 1


def covariance(cs, s, t, y, nodes=33) -> FrozenCovariance:
    """Sigma(s, t, y) = int_s^t a(u, y) du, symmetrised and checked SPD."""
    if not s < t:
        raise InvalidArgument("covariance needs s < t")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    m, used = integrated_diffusion(cs, s, t, y, nodes)
    m = 0.5 * (m + np.swapaxes(m, -1, -2))
    eig = np.linalg.eigvalsh(m)
    if np.any(eig <= 1e-14 * max(1.0, float(np.max(np.abs(eig))))):
        raise EllipticityViolation(f"frozen covariance is not positive definite at y={y.tolist()}", point=y)
    return FrozenCovariance(float(s), float(t), y, m, used)


def _matrix(cov):
    return cov.matrix if isinstance(cov, FrozenCovariance) else np.asarray(cov, dtype=float)


def gaussian_parts(matrix, diff):
    """Density of N(0, matrix) at diff plus Sigma^-1 diff; broadcasts over leading axes."""
    matrix = np.asarray(matrix, dtype=float)
    diff = np.asarray(diff, dtype=float)
    if diff.ndim == 0:
        diff = diff[None]
    d = diff.shape[-1]
    if d == 1:
        var = matrix[..., 0, 0]
        if np.any(var <= 0):
            raise EllipticityViolation("singular covariance")
        sol = diff / var[..., None]
        quad = diff[..., 0] * sol[..., 0]
        dens = np.exp(-0.5 * quad) / np.sqrt(2.0 * math.pi * var)
        return dens, sol
    det = np.linalg.det(matrix)
    if np.any(det <= 0):
        raise EllipticityViolation("singular covariance")
    inv = np.linalg.inv(matrix)
    sol = np.einsum("...ij,...j->...i", inv, diff)
    quad = np.einsum("...i,...i->...", diff, sol)
    dens = np.exp(-0.5 * quad) / np.sqrt((2.0 * math.pi) ** d * det)
    return dens, sol


def frozen_density(cov, x, y):
    """Gaussian with mean x and covariance ``cov`` evaluated at y."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dens, _ = gaussian_parts(_matrix(cov), y - x)
    return dens


def frozen_density_grad(cov, x, y):
    """Gradient in x: Sigma^-1 (y - x) p."""
    dens, sol = gaussian_parts(_matrix(cov), np.asarray(y, float) - np.asarray(x, float))
    return sol * dens[..., None]


def frozen_density_hess(cov, x, y):
    """Hessian in x: (Sigma^-1 (y-x)(y-x)^T Sigma^-1 - Sigma^-1) p."""
    m = _matrix(cov)
    dens, sol = gaussian_parts(m, np.asarray(y, float) - np.asarray(x, float))
    inv = np.linalg.inv(m)
    outer = sol[..., :, None] * sol[..., None, :]
    return (outer - inv) * dens[..., None, None]


@dataclass(frozen=True)
class GaussianRef:
    """p_c(u, z) = c^{d/2} (2 pi u)^{-d/2} exp(-c |z|^2 / (2u))."""

    c: float
    d: int = 1

    def __post_init__(self):
        if not 0.0 < self.c <= 1.0:
            raise InvalidArgument("c must lie in (0, 1]")

    def __call__(self, u, z):
        return p_c_eval(self, u, z)


def sq_norm(z, d):
    """|z|^2 over the trailing coordinate axis; in d = 1 bare scalars are accepted."""
    z = np.asarray(z, dtype=float)
    if d == 1 and (z.ndim == 0 or z.shape[-1] != 1):
        return z * z
    return np.sum(z * z, axis=-1)


def p_c_eval(ref: GaussianRef, u, z):
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise InvalidArgument("p_c needs elapsed time u > 0")
    sq = sq_norm(z, ref.d)
    d = ref.d
    return (ref.c / (2.0 * math.pi * u)) ** (d / 2.0) * np.exp(-ref.c * sq / (2.0 * u))


# ---------------------------------------------------------------- profiles


def q_r_normalizer(r, d=1):
    """c_r such that c_r (1 + |z|)^-r integrates to one over R^d.

    d = 1 uses the closed form (r - 1) / 2, d = 2 radial quadrature.
    """
    if not r > d:
        raise DivergentProfile(f"Q_r is not integrable for r={r} <= d={d}")
    if d == 1:
        return (r - 1.0) / 2.0
    if d == 2:
        mass, _ = integrate.quad(lambda rho: 2.0 * math.pi * rho * (1.0 + rho) ** (-r), 0.0, math.inf,
                                 epsabs=0.0, epsrel=1e-13, limit=200)
        return 1.0 / mass
    raise InvalidArgument("q_r_normalizer supports d in {1, 2}")


@dataclass(frozen=True)
class ConcentrationProfile:
    """Q_r(z) = c_r (1 + |z|)^-r; ``c`` is the concentration used when the
    profile serves as a chi_c weight (see ``scaled_profile``)."""

    r: float
    d: int = 1
    c: float = 1.0

    @property
    def c_r(self):
        return q_r_normalizer(self.r, self.d)

    def q(self, z):
        z = np.asarray(z, dtype=float)
        return self.c_r * (1.0 + np.abs(z)) ** (-self.r)

    def __call__(self, elapsed, displacement):
        return scaled_profile(self.r, self.c, elapsed, displacement, self.d)


def scaled_profile(r, c, elapsed, displacement, d=1):
    """c^d elapsed^{-d/2} Q_r(|displacement| / (elapsed^{1/2} / c))."""
    elapsed = np.asarray(elapsed, dtype=float)
    disp = np.asarray(displacement, dtype=float)
    norm = np.sqrt(sq_norm(disp, d))
    c_r = q_r_normalizer(r, d)
    arg = norm * c / np.sqrt(elapsed)
    return c ** d * elapsed ** (-d / 2.0) * c_r * (1.0 + arg) ** (-r)


def derivative_bound_audit(cs, s, t, y_freeze, displacements):
    """Fitted c1 for the bounds |grad p| <= c1 (t-s)^-1/2 p_c and
    |hess p| <= c1 (t-s)^-1 p_c, with c = (2 Lambda)^-1.

    Returns (c1_grad, c1_hess); both maxima over the displacement grid.
    """
    cov = covariance(cs, s, t, y_freeze)
    y = np.atleast_1d(np.asarray(y_freeze, dtype=float))
    disp = np.asarray(displacements, dtype=float).reshape(-1, cs.dimension)
    x = y[None, :] - disp
    ref = GaussianRef(cs.c, cs.dimension)
    pc = p_c_eval(ref, t - s, disp)
    g = np.linalg.norm(frozen_density_grad(cov, x, y), axis=-1)
    h = np.linalg.norm(frozen_density_hess(cov, x, y).reshape(len(x), -1), axis=-1)
    return float(np.max(g * math.sqrt(t - s) / pc)), float(np.max(h * (t - s) / pc))
