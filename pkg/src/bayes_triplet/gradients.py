"""Hand-derived gradients of the triplet NLL and the Gaussian KL term.

All gradients are taken with respect to the means and the isotropic variances
(not their softplus pre-activations). With ``z = (-m - mu_tau) / sigma_tau``,

    dNLL/dmu_tau  = lambda(z) / sigma_tau
    dNLL/dvar_tau = lambda(z) z / (2 var_tau)

where ``lambda = phi / Phi`` is the inverse Mills ratio. The tau variance is
differentiated through its regrouped form

    D (2 s_p^2 + 2 s_n^2 + 4 s_a (s_p + s_n)) + 4 s_p ||mu_p - mu_a||^2
        + 4 s_n ||mu_n - mu_a||^2 + 4 s_a ||mu_p - mu_n||^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .likelihood import _margin_value, inverse_mills_ratio, log_std_normal_cdf
from .moments import tau_mean_arrays, tau_variance_arrays
from .stochastic import GaussianEmbedding, Triplet


class DegenerateTripletError(ValueError):
    pass


@dataclass(frozen=True)
class TripletGrad:
    d_mu_a: np.ndarray
    d_mu_p: np.ndarray
    d_mu_n: np.ndarray
    d_var_a: float
    d_var_p: float
    d_var_n: float

    def __post_init__(self):
        parts = [self.d_mu_a, self.d_mu_p, self.d_mu_n, self.d_var_a, self.d_var_p, self.d_var_n]
        if not all(np.all(np.isfinite(p)) for p in parts):
            raise ValueError("non-finite gradient entry")

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.d_mu_a, self.d_mu_p, self.d_mu_n, [self.d_var_a, self.d_var_p, self.d_var_n]]
        )


def nll_and_grad_arrays(mu_a, mu_p, mu_n, var_a, var_p, var_n, m=0.0):
    """Batched NLL and its gradients.

    Means have shape (..., D), variances (...). Returns
    ``(nll, d_mu_a, d_mu_p, d_mu_n, d_var_a, d_var_p, d_var_n)``.
    """
    mu_a, mu_p, mu_n = (np.asarray(x, dtype=np.float64) for x in (mu_a, mu_p, mu_n))
    va, vp, vn = (np.asarray(x, dtype=np.float64) for x in (var_a, var_p, var_n))
    dim = mu_a.shape[-1]
    m = _margin_value(m)

    t_mu = tau_mean_arrays(mu_a, mu_p, mu_n, va, vp, vn)
    t_var = tau_variance_arrays(mu_a, mu_p, mu_n, va, vp, vn)
    if np.any(t_var <= 0):
        raise DegenerateTripletError("degenerate triplet: tau variance is zero")
    t_std = np.sqrt(t_var)
    z = (-m - t_mu) / t_std
    loss = -log_std_normal_cdf(z)
    lam = inverse_mills_ratio(z)
    g_mu = lam / t_std
    g_var = lam * z / (2.0 * t_var)

    d_pa = mu_p - mu_a
    d_na = mu_n - mu_a
    d_pn = mu_p - mu_n
    gm = g_mu[..., None]
    gv = g_var[..., None]
    vae, vpe, vne = va[..., None], vp[..., None], vn[..., None]

    d_mu_a = gm * (-2.0 * d_pn) + gv * (-8.0 * vpe * d_pa - 8.0 * vne * d_na)
    d_mu_p = gm * (2.0 * d_pa) + gv * (8.0 * vpe * d_pa + 8.0 * vae * d_pn)
    d_mu_n = gm * (-2.0 * d_na) + gv * (8.0 * vne * d_na - 8.0 * vae * d_pn)

    sq_pa = (d_pa**2).sum(axis=-1)
    sq_na = (d_na**2).sum(axis=-1)
    sq_pn = (d_pn**2).sum(axis=-1)
    d_var_a = g_var * (4.0 * dim * (vp + vn) + 4.0 * sq_pn)
    d_var_p = g_mu * dim + g_var * (4.0 * dim * (vp + va) + 4.0 * sq_pa)
    d_var_n = -g_mu * dim + g_var * (4.0 * dim * (vn + va) + 4.0 * sq_na)
    return loss, d_mu_a, d_mu_p, d_mu_n, d_var_a, d_var_p, d_var_n


def nll_gradients(t: Triplet, m=0.0) -> TripletGrad:
    _, dma, dmp, dmn, dva, dvp, dvn = nll_and_grad_arrays(
        t.anchor.mean,
        t.positive.mean,
        t.negative.mean,
        t.anchor.variance,
        t.positive.variance,
        t.negative.variance,
        m,
    )
    return TripletGrad(dma, dmp, dmn, float(dva), float(dvp), float(dvn))


def kl_grad_arrays(mu, var):
    """Gradient of KL(N(mu, var I) || N(0, I/D)) w.r.t. mu (..., D) and var (...)."""
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    dim = mu.shape[-1]
    return dim * mu, 0.5 * (dim * dim - dim / var)


def kl_gradients(e: GaussianEmbedding) -> tuple[np.ndarray, float]:
    d_mu, d_var = kl_grad_arrays(e.mean, e.variance)
    return d_mu, float(d_var)


@dataclass
class FiniteDiffReport:
    numeric: np.ndarray
    analytic: np.ndarray | None = None
    abs_error: np.ndarray | None = None
    rel_error: np.ndarray | None = None
    nonfinite: list[int] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        if self.rel_error is None or self.rel_error.size == 0:
            return float("nan")
        return float(np.max(self.rel_error))

    @property
    def ok(self) -> bool:
        return not self.nonfinite


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    point,
    analytic=None,
    step: float = 1e-5,
    rel_floor: float = 1e-5,
    richardson: bool = False,
) -> FiniteDiffReport:
    """Central-difference gradient of ``f`` at ``point``, compared with ``analytic``.

    With ``richardson`` the differences at ``step`` and ``step / 2`` are
    combined to cancel the O(step^2) truncation term, which allows larger
    steps and hence less roundoff. Relative errors use ``max(|analytic|, |numeric|, rel_floor * max|numeric|)`` as
    the denominator so that near-zero components do not dominate the report.
    """
    x = np.array(point, dtype=np.float64).reshape(-1)
    numeric = np.empty_like(x)
    nonfinite = []

    def central(i, h):
        orig = x[i]
        x[i] = orig + h
        hi = f(x)
        x[i] = orig - h
        lo = f(x)
        x[i] = orig
        return (hi - lo) / (2.0 * h), bool(np.isfinite(hi) and np.isfinite(lo))

    for i in range(x.size):
        d, finite = central(i, step)
        if richardson:
            d_half, finite_half = central(i, 0.5 * step)
            d = (4.0 * d_half - d) / 3.0
            finite = finite and finite_half
        numeric[i] = d
        if not finite:
            nonfinite.append(i)
    report = FiniteDiffReport(numeric=numeric, nonfinite=nonfinite)
    if analytic is not None:
        analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
        if analytic.shape != numeric.shape:
            raise ValueError("analytic gradient shape does not match the parameter vector")
        abs_err = np.abs(analytic - numeric)
        scale = rel_floor * max(float(np.max(np.abs(numeric), initial=0.0)), 1e-300)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)
        report.analytic = analytic
        report.abs_error = abs_err
        report.rel_error = abs_err / denom
    return report


def triplet_to_vector(t: Triplet) -> np.ndarray:
    return np.concatenate(
        [
            t.anchor.mean,
            t.positive.mean,
            t.negative.mean,
            [t.anchor.variance, t.positive.variance, t.negative.variance],
        ]
    )


def triplet_from_vector(vec: np.ndarray, dim: int) -> Triplet:
    vec = np.asarray(vec, dtype=np.float64)
    mus = vec[: 3 * dim].reshape(3, dim)
    va, vp, vn = vec[3 * dim :]
    return Triplet(
        GaussianEmbedding(mus[0], va, exact=True),
        GaussianEmbedding(mus[1], vp, exact=True),
        GaussianEmbedding(mus[2], vn, exact=True),
    )
