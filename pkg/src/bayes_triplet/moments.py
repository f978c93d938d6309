"""Closed-form mean and variance of ``tau = ||a - p||^2 - ||a - n||^2``.

``a``, ``p`` and ``n`` are independent isotropic Gaussians. Per coordinate,

    E[tau_d]   = mu_p^2 + s_p - mu_n^2 - s_n - 2 mu_a (mu_p - mu_n)
    Var[tau_d] = Var[p(p - 2a)] + Var[n(n - 2a)] - 2 Cov[p(p - 2a), n(n - 2a)]

with ``s_x`` the isotropic variance of ``x`` and

    Var[p(p - 2a)] = 2 [s_p^2 + 2 mu_p^2 s_p + 2 (s_a + mu_a^2)(s_p + mu_p^2)
                        - 2 mu_a^2 mu_p^2 - 4 mu_a mu_p s_p]
    Cov[...]       = 4 mu_p mu_n s_a.

Coordinates are independent, so the D-dimensional moments are coordinate sums.
The array kernels broadcast over any leading batch axes: means have shape
``(..., D)`` and variances shape ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stochastic import Triplet


@dataclass(frozen=True)
class TauMoments:
    mean: float
    variance: float
    dimension: int

    def __post_init__(self):
        if not self.variance >= 0:
            raise ValueError(f"tau variance must be >= 0, got {self.variance}")

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))


def tau_mean_arrays(mu_a, mu_p, mu_n, var_a, var_p, var_n):
    mu_a, mu_p, mu_n = (np.asarray(m, dtype=np.float64) for m in (mu_a, mu_p, mu_n))
    dim = mu_a.shape[-1]
    per_dim = mu_p**2 - mu_n**2 - 2.0 * mu_a * (mu_p - mu_n)
    return per_dim.sum(axis=-1) + dim * (np.asarray(var_p) - np.asarray(var_n))


def _var_product_term(mu_a, mu_x, var_a, var_x):
    # Var[x (x - 2a)] per coordinate
    return 2.0 * (
        var_x**2
        + 2.0 * mu_x**2 * var_x
        + 2.0 * (var_a + mu_a**2) * (var_x + mu_x**2)
        - 2.0 * mu_a**2 * mu_x**2
        - 4.0 * mu_a * mu_x * var_x
    )


def tau_variance_arrays(mu_a, mu_p, mu_n, var_a, var_p, var_n):
    mu_a, mu_p, mu_n = (np.asarray(m, dtype=np.float64) for m in (mu_a, mu_p, mu_n))
    va = np.asarray(var_a, dtype=np.float64)[..., None]
    vp = np.asarray(var_p, dtype=np.float64)[..., None]
    vn = np.asarray(var_n, dtype=np.float64)[..., None]
    per_dim = (
        _var_product_term(mu_a, mu_p, va, vp)
        + _var_product_term(mu_a, mu_n, va, vn)
        - 8.0 * mu_p * mu_n * va
    )
    raw = per_dim.sum(axis=-1)
    scale = (np.abs(per_dim) + 1.0).sum(axis=-1)
    assert np.all(raw >= -1e-9 * scale), "tau variance closed form went negative"
    return np.maximum(raw, 0.0)


def tau_variance_compact(mu_a, mu_p, mu_n, var_a, var_p, var_n):
    """Same value as :func:`tau_variance_arrays`, regrouped into nonnegative terms.

    D (2 s_p^2 + 2 s_n^2 + 4 s_a (s_p + s_n)) + 4 s_p ||mu_p - mu_a||^2
        + 4 s_n ||mu_n - mu_a||^2 + 4 s_a ||mu_p - mu_n||^2
    """
    mu_a, mu_p, mu_n = (np.asarray(m, dtype=np.float64) for m in (mu_a, mu_p, mu_n))
    dim = mu_a.shape[-1]
    va, vp, vn = (np.asarray(v, dtype=np.float64) for v in (var_a, var_p, var_n))
    d_pa = ((mu_p - mu_a) ** 2).sum(axis=-1)
    d_na = ((mu_n - mu_a) ** 2).sum(axis=-1)
    d_pn = ((mu_p - mu_n) ** 2).sum(axis=-1)
    return (
        dim * (2 * vp**2 + 2 * vn**2 + 4 * va * (vp + vn))
        + 4 * vp * d_pa
        + 4 * vn * d_na
        + 4 * va * d_pn
    )


def _unpack(t: Triplet):
    return (
        t.anchor.mean,
        t.positive.mean,
        t.negative.mean,
        t.anchor.variance,
        t.positive.variance,
        t.negative.variance,
    )


def tau_mean(t: Triplet) -> float:
    return float(tau_mean_arrays(*_unpack(t)))


def tau_variance(t: Triplet) -> float:
    return float(tau_variance_arrays(*_unpack(t)))


def tau_moments(t: Triplet) -> TauMoments:
    return TauMoments(tau_mean(t), tau_variance(t), t.dim)
