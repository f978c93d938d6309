"""Gaussian (CLT) likelihood of the triplet constraint ``tau < -m``."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .moments import TauMoments, tau_moments
from .stochastic import Triplet, TripletLabel

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DeterministicViolationWarning(RuntimeWarning):
    """A zero-variance triplet violates the constraint, so its NLL is +inf."""


@dataclass(frozen=True)
class Margin:
    value: float = 0.0

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError(f"margin must be >= 0, got {self.value}")


def _margin_value(m) -> float:
    return m.value if isinstance(m, Margin) else float(m)


def log_std_normal_cdf(z):
    """Stable ``log Phi(z)``.

    Negative arguments go through the scaled complementary error function,
    ``Phi(z) = erfcx(-z/sqrt2) exp(-z^2/2) / 2``, so nothing underflows however
    far into the tail ``z`` is; nonnegative arguments use ``log1p(-Phi(-z))``.
    """
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    neg = z < 0
    zn = z[neg]
    out[neg] = np.log(0.5 * special.erfcx(-zn / _SQRT2)) - 0.5 * zn * zn
    zp = z[~neg]
    out[~neg] = np.log1p(-0.5 * special.erfc(zp / _SQRT2))
    return out if out.ndim else float(out)


def log_std_normal_pdf(z):
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * z * z - _LOG_SQRT_2PI


def inverse_mills_ratio(z):
    """``phi(z) / Phi(z)`` evaluated in log space."""
    return np.exp(log_std_normal_pdf(z) - log_std_normal_cdf(z))


def triplet_probability(mo: TauMoments, m=0.0) -> float:
    m = _margin_value(m)
    if mo.variance == 0:
        if mo.mean < -m:
            return 1.0
        return 0.5 if mo.mean == -m else 0.0
    return float(special.ndtr((-m - mo.mean) / math.sqrt(mo.variance)))


def nll(mo: TauMoments, m=0.0) -> float:
    """``-log P(tau < -m)`` under the Gaussian approximation of ``tau``."""
    m = _margin_value(m)
    if mo.variance == 0:
        if mo.mean < -m:
            return 0.0
        if mo.mean == -m:
            return math.log(2.0)
        warnings.warn(
            "deterministic triplet violates the constraint; NLL is +inf",
            DeterministicViolationWarning,
            stacklevel=2,
        )
        return math.inf
    z = (-m - mo.mean) / math.sqrt(mo.variance)
    return -log_std_normal_cdf(z)


def nll_arrays(tau_mu, tau_var, m=0.0):
    """Vectorized NLL for strictly positive ``tau_var``."""
    z = (-_margin_value(m) - np.asarray(tau_mu)) / np.sqrt(tau_var)
    return -log_std_normal_cdf(z)


def triplet_nll(t: Triplet, m=0.0, label: TripletLabel | None = None) -> float:
    # Triplets with all-same or all-different classes carry no likelihood term.
    if label is not None and not label.informative:
        return 0.0
    return nll(tau_moments(t), m)


def hinge_triplet_loss(t: Triplet, m=0.0) -> float:
    """``max(0, ||mu_a - mu_p||^2 - ||mu_a - mu_n||^2 + m)`` on the means."""
    d_ap = t.anchor.mean - t.positive.mean
    d_an = t.anchor.mean - t.negative.mean
    return max(0.0, float(d_ap @ d_ap - d_an @ d_an) + _margin_value(m))
