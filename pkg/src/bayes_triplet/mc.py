"""Monte Carlo ground truth for tau and the CLT approximation study.

Samples are drawn in fixed-size chunks and chunk ``c`` is generated from the
key ``(*seed, c)``; output therefore depends only on the seed and ``n``, never
on how chunks are scheduled.

Two exact samplers are provided. ``direct`` draws ``a``, ``p``, ``n`` and forms
tau literally, at cost O(n D). ``chi2`` uses that, per coordinate, ``(a - p,
a - n)`` is bivariate normal with a covariance shared by every coordinate, so
diagonalising the quadratic form ``u^2 - w^2`` writes tau exactly as
``l1 X1 + l2 X2 + c`` with independent noncentral chi-square ``X1, X2`` on D
degrees of freedom. It costs O(n) and makes D = 2048 studies cheap.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .moments import TauMoments, tau_moments
from .stochastic import GaussianEmbedding, Triplet

CHUNK = 8192
DEFAULT_DIMS = (1, 2, 4, 8, 16, 32, 128, 512, 2048)
_DIRECT_BUDGET = 1_000_000


def _seed_key(seed) -> list[int]:
    if seed is None:
        return [0]
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def _chunk_rngs(seed, n):
    key = _seed_key(seed)
    for c, start in enumerate(range(0, n, CHUNK)):
        yield np.random.default_rng(key + [c]), min(CHUNK, n - start)


def _sample_direct(t: Triplet, n: int, seed) -> np.ndarray:
    dim = t.dim
    sd = [np.sqrt(e.variance) for e in (t.anchor, t.positive, t.negative)]
    out = []
    for rng, size in _chunk_rngs(seed, n):
        a = t.anchor.mean + sd[0] * rng.standard_normal((size, dim))
        p = t.positive.mean + sd[1] * rng.standard_normal((size, dim))
        q = t.negative.mean + sd[2] * rng.standard_normal((size, dim))
        out.append(((a - p) ** 2).sum(axis=1) - ((a - q) ** 2).sum(axis=1))
    return np.concatenate(out)


def chi2_decomposition(t: Triplet):
    """Weights, noncentralities and offset with tau = sum_j w_j X_j + offset.

    ``X_j ~ noncentral chi2(D, nonc_j)``. Returns None when the per-coordinate
    covariance of ``(a - p, a - n)`` is singular.
    """
    va, vp, vn = t.anchor.variance, t.positive.variance, t.negative.variance
    cov = np.array([[va + vp, va], [va, va + vn]])
    if va * vp + va * vn + vp * vn <= 0:
        return None
    chol = np.linalg.cholesky(cov)
    sign = np.diag([1.0, -1.0])
    lam, q = np.linalg.eigh(chol.T @ sign @ chol)
    offsets = np.stack([t.anchor.mean - t.positive.mean, t.anchor.mean - t.negative.mean], axis=1)
    beta = offsets @ (sign @ chol @ q)  # (D, 2): rows are Q^T L^T J m_d
    nonc = (beta**2).sum(axis=0) / lam**2
    const = float((offsets[:, 0] ** 2 - offsets[:, 1] ** 2).sum() - ((beta**2).sum(axis=0) / lam).sum())
    return lam, nonc, const


def _sample_chi2(t: Triplet, n: int, seed, decomposition) -> np.ndarray:
    lam, nonc, const = decomposition
    dim = t.dim
    out = []
    for rng, size in _chunk_rngs(seed, n):
        x1 = rng.noncentral_chisquare(dim, nonc[0], size) if nonc[0] > 0 else rng.chisquare(dim, size)
        x2 = rng.noncentral_chisquare(dim, nonc[1], size) if nonc[1] > 0 else rng.chisquare(dim, size)
        out.append(lam[0] * x1 + lam[1] * x2 + const)
    return np.concatenate(out)


def sample_tau(t: Triplet, n: int, seed=None, method: str = "auto") -> np.ndarray:
    """Draw ``n`` i.i.d. samples of ``||a - p||^2 - ||a - n||^2``.

    ``method`` is ``"direct"``, ``"chi2"`` or ``"auto"`` (direct while
    ``n * D`` is small, chi2 otherwise).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if method not in ("auto", "direct", "chi2"):
        raise ValueError(f"unknown sampling method {method!r}")
    decomposition = chi2_decomposition(t) if method != "direct" else None
    if method == "chi2" and decomposition is None:
        raise ValueError("chi2 sampler needs at least two positive variances")
    if method == "direct" or decomposition is None or (method == "auto" and n * t.dim <= _DIRECT_BUDGET):
        return _sample_direct(t, n, seed)
    return _sample_chi2(t, n, seed, decomposition)


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    se_mean: float
    variance: float
    se_variance: float
    n: int


def estimate_moments(samples) -> MomentEstimate:
    """Sample mean/variance with standard errors.

    The variance's standard error uses the fourth central moment, which
    matters because tau is heavy-tailed at small D.
    """
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    mean = float(x.mean())
    centred = x - mean
    m2 = float((centred**2).mean())
    m4 = float((centred**4).mean())
    var = m2 * n / (n - 1) if n > 1 else 0.0
    se_var = float(np.sqrt(max(m4 - m2 * m2 * (n - 3) / (n - 1), 0.0) / n))
    return MomentEstimate(mean, float(np.sqrt(var / n)), var, se_var, n)


def ks_distance(samples, mo: TauMoments) -> float:
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two samples")
    if not mo.variance > 0:
        raise ValueError("KS distance needs a positive tau variance")
    return float(stats.kstest(x, "norm", args=(mo.mean, np.sqrt(mo.variance))).statistic)


def exceedance_fraction(samples, m: float) -> float:
    """Fraction of samples with ``tau < -m``."""
    return float(np.mean(np.asarray(samples) < -m))


def random_triplet(dim: int, rng: np.random.Generator) -> Triplet:
    """Randomised configuration: standard normal means, half-normal variances."""
    mus = rng.standard_normal((3, dim))
    variances = np.abs(rng.standard_normal(3))
    return Triplet(*(GaussianEmbedding(mu, v) for mu, v in zip(mus, variances)))


@dataclass
class ApproxStudyRow:
    dim: int
    trial: int
    mu_analytic: float
    mu_mc: float
    se_mu: float
    var_analytic: float
    var_mc: float
    se_var: float
    ks: float
    n: int


CSV_FIELDS = ("dim", "trial", "mu_analytic", "mu_mc", "se_mu", "var_analytic", "var_mc", "se_var", "ks", "n")


@dataclass
class ApproxStudyReport:
    rows: list[ApproxStudyRow] = field(default_factory=list)
    seed: int | None = None

    def dims(self) -> list[int]:
        return sorted({r.dim for r in self.rows})

    def median_ks_by_dim(self) -> dict[int, float]:
        return {d: float(np.median([r.ks for r in self.rows if r.dim == d])) for d in self.dims()}

    def moment_z_scores(self) -> np.ndarray:
        """|analytic - mc| / se for mean and variance, shape (rows, 2)."""
        z = []
        for r in self.rows:
            z.append(
                [
                    abs(r.mu_analytic - r.mu_mc) / r.se_mu if r.se_mu > 0 else 0.0,
                    abs(r.var_analytic - r.var_mc) / r.se_var if r.se_var > 0 else 0.0,
                ]
            )
        return np.array(z)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in self.rows:
            row = asdict(r)
            writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in CSV_FIELDS])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {"version": 1, "seed": self.seed, "rows": [asdict(r) for r in self.rows]}
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ApproxStudyReport":
        payload = json.loads(text)
        return cls([ApproxStudyRow(**r) for r in payload["rows"]], payload.get("seed"))


def run_approximation_study(
    dims=DEFAULT_DIMS, trials_per_dim: int = 5, n_samples: int = 100_000, seed: int = 0
) -> ApproxStudyReport:
    """Compare empirical tau against its Gaussian approximation across dimensions."""
    dims = list(dims)
    if not dims:
        raise ValueError("dims must be nonempty")
    report = ApproxStudyReport(seed=seed)
    for dim in dims:
        for trial in range(trials_per_dim):
            t = random_triplet(dim, np.random.default_rng([seed, dim, trial, 0]))
            mo = tau_moments(t)
            samples = sample_tau(t, n_samples, seed=(seed, dim, trial, 1))
            est = estimate_moments(samples)
            report.rows.append(
                ApproxStudyRow(
                    dim=dim,
                    trial=trial,
                    mu_analytic=mo.mean,
                    mu_mc=est.mean,
                    se_mu=est.se_mean,
                    var_analytic=mo.variance,
                    var_mc=est.variance,
                    se_var=est.se_variance,
                    ks=ks_distance(samples, mo),
                    n=n_samples,
                )
            )
    return report
