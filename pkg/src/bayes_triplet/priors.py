"""Feature-space priors, closed-form KL divergences and vMF special functions.

Two priors mimic l2 normalization: ``N(0, I/D)``, which concentrates on the unit
sphere, and the uniform distribution on ``S^{D-1}``. The matching variational
families are isotropic Gaussians and von Mises-Fisher distributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import gammaln, logsumexp

from .stochastic import GaussianEmbedding, VmfEmbedding

GAUSSIAN_UNIT_SPHERE = "gaussian_unit_sphere"
UNIFORM_SPHERE = "uniform_sphere"


@dataclass(frozen=True)
class PriorSpec:
    kind: str
    dimension: int

    def __post_init__(self):
        if self.kind not in (GAUSSIAN_UNIT_SPHERE, UNIFORM_SPHERE):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        min_dim = 2 if self.kind == UNIFORM_SPHERE else 1
        if self.dimension < min_dim:
            raise ValueError(f"{self.kind} prior needs dimension >= {min_dim}")


# -- Gaussian prior ------------------------------------------------------------


def kl_gaussian_arrays(mu, var):
    """KL(N(mu, var I) || N(0, I/D)) for means of shape (..., D)."""
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    dim = mu.shape[-1]
    sq = (mu * mu).sum(axis=-1)
    return 0.5 * (dim * dim * var + dim * sq - dim - dim * np.log(dim * var))


def kl_gaussian_to_prior(e: GaussianEmbedding) -> float:
    if not e.variance > 0:
        raise ValueError("KL to the Gaussian prior needs a strictly positive variance")
    return float(kl_gaussian_arrays(e.mean, e.variance))


# -- modified Bessel function of the first kind -------------------------------

SERIES_MAX_X = 20.0
DEBYE_MIN_ORDER = 50.0
_SERIES_TERMS = 120
_DEBYE_TERMS = 9


@lru_cache(maxsize=1)
def _debye_polynomials() -> tuple[Polynomial, ...]:
    """Polynomials ``u_k(t)`` of the uniform asymptotic expansion of ``I_nu``.

    ``u_{k+1}(t) = t^2 (1 - t^2) u_k'(t) / 2 + (1/8) int_0^t (1 - 5 s^2) u_k(s) ds``
    """
    t = Polynomial([0.0, 1.0])
    polys = [Polynomial([1.0])]
    for _ in range(_DEBYE_TERMS - 1):
        u = polys[-1]
        integrand = (1 - 5 * t**2) * u
        polys.append(0.5 * t**2 * (1 - t**2) * u.deriv() + integrand.integ(lbnd=0) / 8)
    return tuple(polys)


def _log_iv_series(nu: float, x: float) -> float:
    # I_nu(x) = sum_k (x/2)^(2k + nu) / (k! Gamma(nu + k + 1)); every term is positive.
    k = np.arange(_SERIES_TERMS, dtype=np.float64)
    half_log = math.log(0.5 * x)
    log_terms = (2 * k + nu) * half_log - gammaln(k + 1) - gammaln(nu + k + 1)
    return float(logsumexp(log_terms))


def _log_iv_scaled_excess(nu: float, x: float) -> float:
    """``log I_nu(x) - nu log(x/2) + lgamma(nu + 1)`` as log1p of the series tail.

    Stays accurate when the result is tiny, where subtracting the leading
    term from ``log I_nu`` would cancel.
    """
    q = 0.25 * x * x
    term = 1.0
    tail = 0.0
    for k in range(1, _SERIES_TERMS):
        term *= q / (k * (nu + k))
        tail += term
        if term < 1e-17 * tail:
            break
    return math.log1p(tail)


def _log_iv_debye(nu: float, x: float) -> float:
    z = x / nu
    root = math.sqrt(1.0 + z * z)
    t = 1.0 / root
    eta = root + math.log(z / (1.0 + root))
    correction = sum(u(t) / nu**k for k, u in enumerate(_debye_polynomials()))
    return (
        nu * eta
        - 0.5 * math.log(2.0 * math.pi * nu)
        - 0.5 * math.log(root)
        + math.log(correction)
    )


def _log_iv_large_x(nu: float, x: float) -> float:
    """Debye expansion at an order >= DEBYE_MIN_ORDER, carried down by ratios.

    The ratios ``r_j = I_j / I_{j-1}`` obey ``1 / r_j = 2j/x + r_{j+1}``; running
    it downward is the stable direction for ``I``.
    """
    if nu >= DEBYE_MIN_ORDER:
        return _log_iv_debye(nu, x)
    steps = math.ceil(DEBYE_MIN_ORDER - nu)
    top = nu + steps
    log_top = _log_iv_debye(top, x)
    ratio = math.exp(log_top - _log_iv_debye(top - 1.0, x))
    log_sum = math.log(ratio)
    for j in range(steps - 1, 0, -1):
        ratio = 1.0 / (2.0 * (nu + j) / x + ratio)
        log_sum += math.log(ratio)
    return log_top - log_sum


def _log_iv_scalar(nu: float, x: float) -> float:
    if nu < 0 or x < 0 or not (math.isfinite(nu) and math.isfinite(x)):
        raise ValueError(f"log_bessel_iv needs finite order >= 0 and x >= 0, got ({nu}, {x})")
    if x == 0.0:
        return 0.0 if nu == 0.0 else -math.inf
    if x <= SERIES_MAX_X:
        return _log_iv_series(nu, x)
    return _log_iv_large_x(nu, x)


def log_bessel_iv(order, x):
    """``log I_order(x)`` for order >= 0, x >= 0; broadcasts over array inputs."""
    order_arr, x_arr = np.broadcast_arrays(
        np.asarray(order, dtype=np.float64), np.asarray(x, dtype=np.float64)
    )
    if order_arr.ndim == 0:
        return _log_iv_scalar(float(order_arr), float(x_arr))
    out = np.empty(order_arr.shape)
    for idx in np.ndindex(order_arr.shape):
        out[idx] = _log_iv_scalar(float(order_arr[idx]), float(x_arr[idx]))
    return out


# -- von Mises-Fisher ------------------------------------------------------------


def log_sphere_area(dim: int) -> float:
    """log surface area of the unit sphere S^{dim-1} in R^dim."""
    return math.log(2.0) + 0.5 * dim * math.log(math.pi) - float(gammaln(0.5 * dim))


def vmf_log_normalizer(dim: int, kappa: float) -> float:
    """``log C_D(kappa)`` so that ``C_D(kappa) exp(kappa mu^T x)`` integrates to 1."""
    if dim < 2:
        raise ValueError("vMF needs dimension >= 2")
    if kappa < 0:
        raise ValueError("concentration must be >= 0")
    if kappa == 0:
        return -log_sphere_area(dim)
    nu = 0.5 * dim - 1.0
    return nu * math.log(kappa) - 0.5 * dim * math.log(2 * math.pi) - log_bessel_iv(nu, kappa)


def vmf_mean_resultant(dim: int, kappa: float) -> float:
    """``A_D(kappa) = I_{D/2}(kappa) / I_{D/2-1}(kappa)``, the mean resultant length."""
    if kappa < 0:
        raise ValueError("concentration must be >= 0")
    if kappa == 0:
        return 0.0
    nu = 0.5 * dim - 1.0
    return math.exp(log_bessel_iv(nu + 1.0, kappa) - log_bessel_iv(nu, kappa))


def vmf_mean_resultant_derivative(dim: int, kappa: float) -> float:
    """``dA_D/dkappa = 1 - A^2 - (D - 1) A / kappa``."""
    if kappa == 0:
        return 1.0 / dim
    a = vmf_mean_resultant(dim, kappa)
    return 1.0 - a * a - (dim - 1) * a / kappa


def _kl_vmf_scalar(dim: int, kappa: float, a: float, log_i_nu: float) -> float:
    nu = 0.5 * dim - 1.0
    if kappa <= SERIES_MAX_X:
        # log C + log S collapses to minus the scaled series excess
        return max(0.0, kappa * a - _log_iv_scaled_excess(nu, kappa))
    log_c = nu * math.log(kappa) - 0.5 * dim * math.log(2 * math.pi) - log_i_nu
    return max(0.0, kappa * a + log_c + log_sphere_area(dim))


def kl_vmf_to_uniform(e: VmfEmbedding) -> float:
    kappa, dim = e.concentration, e.dim
    if kappa == 0:
        return 0.0
    nu = 0.5 * dim - 1.0
    return _kl_vmf_scalar(dim, kappa, vmf_mean_resultant(dim, kappa), log_bessel_iv(nu, kappa))


def kl_vmf_derivative(dim: int, kappa: float) -> float:
    """``d KL(vMF || uniform) / dkappa = kappa A'(kappa)``."""
    return kappa * vmf_mean_resultant_derivative(dim, kappa)


def vmf_batch_terms(dim: int, kappa) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(A, dA/dkappa, KL to uniform)`` for an array of concentrations.

    Shares the two Bessel evaluations per item between the three quantities.
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(kappa < 0):
        raise ValueError("concentration must be >= 0")
    nu = 0.5 * dim - 1.0
    pos = kappa > 0
    k = np.where(pos, kappa, 1.0)
    log_i_nu = log_bessel_iv(np.full(k.shape, nu), k)
    log_i_up = log_bessel_iv(np.full(k.shape, nu + 1.0), k)
    a = np.where(pos, np.exp(log_i_up - log_i_nu), 0.0)
    da = np.where(pos, 1.0 - a * a - (dim - 1) * a / k, 1.0 / dim)
    kl = np.array([_kl_vmf_scalar(dim, kk, aa, li) if p else 0.0 for kk, aa, li, p in zip(k.ravel(), a.ravel(), np.ravel(log_i_nu), pos.ravel())]).reshape(k.shape)
    return a, da, kl


def vmf_to_gaussian_moments(e: VmfEmbedding) -> GaussianEmbedding:
    """Isotropic Gaussian with the vMF's mean and total second moment (= 1)."""
    a = vmf_mean_resultant(e.dim, e.concentration)
    return GaussianEmbedding(a * e.direction, (1.0 - a * a) / e.dim, exact=True)


def sample_vmf(e: VmfEmbedding, n: int, seed=None) -> np.ndarray:
    """Draw ``n`` samples with Wood's rejection scheme; returns shape (n, D)."""
    rng = np.random.default_rng(seed)
    dim, kappa = e.dim, e.concentration
    mu = e.direction
    m1 = dim - 1.0
    b = m1 / (2.0 * kappa + math.sqrt(4.0 * kappa * kappa + m1 * m1))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m1 * math.log(1.0 - x0 * x0)

    w = np.empty(0)
    while w.size < n:
        batch = max(16, int(1.3 * (n - w.size)))
        z = rng.beta(0.5 * m1, 0.5 * m1, size=batch)
        cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        log_u = np.log(rng.uniform(size=batch))
        keep = kappa * cand + m1 * np.log1p(-x0 * cand) - c >= log_u
        w = np.concatenate([w, cand[keep]])
    w = w[:n]

    tangent = rng.standard_normal((n, dim - 1))
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    samples = np.concatenate([w[:, None], np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * tangent], axis=1)

    # Householder reflection taking e_1 to mu
    u = np.zeros(dim)
    u[0] = 1.0
    u -= mu
    norm_u = np.linalg.norm(u)
    if norm_u > 1e-12:
        u /= norm_u
        samples -= 2.0 * np.outer(samples @ u, u)
    samples /= np.linalg.norm(samples, axis=1, keepdims=True)
    return samples
