"""Retrieval, calibration and OOD-separation metrics for stochastic embeddings.

Calibration follows the retrieval adaptation of ECE: queries are sorted by
predicted variance and split into ``M`` equally sized bins. A bin's confidence
is one minus the mean percentile rank of its queries' variances, so a model
whose mAP@k falls linearly with variance rank is perfectly calibrated.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .stochastic import DimensionMismatchError, GaussianEmbedding

MODES = ("means", "expected")
_QUERY_CHUNK = 256


@dataclass
class RetrievalResult:
    """Top-k neighbours for a set of queries.

    ``nn_covariance`` is the trace of the covariance of the query-to-NN
    difference, ``D (var_q + var_nn)``.
    """

    neighbors: np.ndarray
    distances: np.ndarray
    relevant: np.ndarray
    n_relevant: np.ndarray
    query_variance: np.ndarray
    nn_covariance: np.ndarray
    mode: str = "means"
    notes: list[str] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def __len__(self) -> int:
        return self.neighbors.shape[0]

    def to_json(self) -> str:
        payload = {
            "version": 1,
            "mode": self.mode,
            "notes": self.notes,
            "neighbors": self.neighbors.tolist(),
            "distances": self.distances.tolist(),
            "relevant": self.relevant.astype(int).tolist(),
            "n_relevant": self.n_relevant.tolist(),
            "query_variance": self.query_variance.tolist(),
            "nn_covariance": self.nn_covariance.tolist(),
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RetrievalResult":
        p = json.loads(text)
        return cls(
            neighbors=np.array(p["neighbors"], dtype=np.int64),
            distances=np.array(p["distances"], dtype=np.float64),
            relevant=np.array(p["relevant"], dtype=bool),
            n_relevant=np.array(p["n_relevant"], dtype=np.int64),
            query_variance=np.array(p["query_variance"], dtype=np.float64),
            nn_covariance=np.array(p["nn_covariance"], dtype=np.float64),
            mode=p["mode"],
            notes=list(p["notes"]),
        )


def _stack(embeddings) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(embeddings, GaussianEmbedding):
        embeddings = [embeddings]
    means = np.stack([e.mean for e in embeddings])
    variances = np.array([e.variance for e in embeddings])
    return means, variances


def retrieve_arrays(
    db_means,
    db_vars,
    db_labels,
    q_means,
    q_vars,
    q_labels,
    k: int,
    mode: str = "means",
    exclude_self: bool = False,
) -> RetrievalResult:
    """Exact top-k search; ties keep database order.

    With ``exclude_self`` the queries are the database itself and query ``i``
    never retrieves item ``i``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    db_means = np.atleast_2d(np.asarray(db_means, dtype=np.float64))
    q_means = np.atleast_2d(np.asarray(q_means, dtype=np.float64))
    db_vars = np.asarray(db_vars, dtype=np.float64).reshape(-1)
    q_vars = np.asarray(q_vars, dtype=np.float64).reshape(-1)
    db_labels = np.asarray(db_labels).reshape(-1)
    q_labels = np.asarray(q_labels).reshape(-1)
    if db_means.shape[0] == 0:
        raise ValueError("database is empty")
    if db_means.shape[1] != q_means.shape[1]:
        raise DimensionMismatchError(f"query dimension {q_means.shape[1]} != database {db_means.shape[1]}")
    if exclude_self and q_means.shape[0] != db_means.shape[0]:
        raise ValueError("exclude_self needs the queries to be the database")
    dim = db_means.shape[1]
    n_db = db_means.shape[0] - (1 if exclude_self else 0)
    notes = []
    if k > n_db:
        notes.append(f"k={k} exceeds database size {n_db}; truncated")
        k = n_db
    if k < 1:
        raise ValueError("k must be >= 1")

    n_q = q_means.shape[0]
    neighbors = np.empty((n_q, k), dtype=np.int64)
    distances = np.empty((n_q, k))
    for start in range(0, n_q, _QUERY_CHUNK):
        stop = min(start + _QUERY_CHUNK, n_q)
        diff = q_means[start:stop, None, :] - db_means[None, :, :]
        dist = np.einsum("qnd,qnd->qn", diff, diff)
        if mode == "expected":
            dist = dist + dim * (q_vars[start:stop, None] + db_vars[None, :])
        if exclude_self:
            rows = np.arange(stop - start)
            dist[rows, rows + start] = np.inf
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]
        neighbors[start:stop] = order
        distances[start:stop] = np.take_along_axis(dist, order, axis=1)

    relevant = db_labels[neighbors] == q_labels[:, None]
    n_relevant = (q_labels[:, None] == db_labels[None, :]).sum(axis=1)
    if exclude_self:
        n_relevant = n_relevant - 1
    nn_cov = dim * (q_vars + db_vars[neighbors[:, 0]])
    return RetrievalResult(neighbors, distances, relevant, n_relevant, q_vars.copy(), nn_cov, mode, notes)


def retrieve(db, db_labels, queries, query_labels, k: int, mode: str = "means") -> RetrievalResult:
    """Rank ``db`` (GaussianEmbeddings) for each query embedding."""
    db_means, db_vars = _stack(db)
    q_means, q_vars = _stack(queries)
    if isinstance(queries, GaussianEmbedding):
        query_labels = [query_labels]
    return retrieve_arrays(db_means, db_vars, db_labels, q_means, q_vars, query_labels, k, mode)


def _check_k(results: RetrievalResult, k: int):
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > results.k:
        raise ValueError(f"results only hold the top {results.k} neighbours, asked for {k}")


def recall_at_k(results: RetrievalResult, k: int) -> float:
    _check_k(results, k)
    return float(results.relevant[:, :k].any(axis=1).mean())


def average_precision_at_k(results: RetrievalResult, k: int) -> np.ndarray:
    """Per-query AP@k, normalised by ``min(k, number of relevant items)``."""
    _check_k(results, k)
    rel = results.relevant[:, :k].astype(np.float64)
    precision = np.cumsum(rel, axis=1) / np.arange(1, k + 1)
    norm = np.minimum(k, results.n_relevant).astype(np.float64)
    ap = (precision * rel).sum(axis=1)
    return np.divide(ap, norm, out=np.zeros_like(ap), where=norm > 0)


def map_at_k(results: RetrievalResult, k: int) -> float:
    return float(average_precision_at_k(results, k).mean())


@dataclass(frozen=True)
class CalibrationBin:
    count: int
    map_at_k: float
    conf: float
    mean_variance: float


@dataclass
class CalibrationReport:
    k: int
    bins: list[CalibrationBin]

    @property
    def n_queries(self) -> int:
        return sum(b.count for b in self.bins)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bin", "count", "map_at_k", "conf"])
        for i, b in enumerate(self.bins):
            writer.writerow([i, b.count, repr(b.map_at_k), repr(b.conf)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, k: int) -> "CalibrationReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        bins = [CalibrationBin(int(r["count"]), float(r["map_at_k"]), float(r["conf"]), float("nan")) for r in rows]
        return cls(k, bins)


def variance_percentile_rank(variances) -> np.ndarray:
    """Midpoint percentile ranks in (0, 1); ties share their average rank."""
    v = np.asarray(variances, dtype=np.float64)
    return (rankdata(v, method="average") - 0.5) / v.size


def calibration_bins(results: RetrievalResult, M: int = 10, k: int = 1) -> CalibrationReport:
    n = len(results)
    if n < M:
        raise ValueError(f"need at least M={M} queries, got {n}")
    ap = average_precision_at_k(results, k)
    var = results.query_variance
    pct = variance_percentile_rank(var)
    order = np.argsort(var, kind="stable")
    bins = []
    for idx in np.array_split(order, M):
        bins.append(
            CalibrationBin(
                count=int(idx.size),
                map_at_k=float(ap[idx].mean()),
                conf=float(1.0 - pct[idx].mean()),
                mean_variance=float(var[idx].mean()),
            )
        )
    return CalibrationReport(k, bins)


def ece_at_k(report: CalibrationReport) -> float:
    n = report.n_queries
    return float(sum(b.count / n * abs(b.map_at_k - b.conf) for b in report.bins))


def auroc(negative_scores, positive_scores) -> float:
    """Probability that a positive outscores a negative, ties counted half."""
    neg = np.asarray(negative_scores, dtype=np.float64).reshape(-1)
    pos = np.asarray(positive_scores, dtype=np.float64).reshape(-1)
    ranks = rankdata(np.concatenate([neg, pos]))
    pos_rank_sum = ranks[neg.size :].sum()
    return float((pos_rank_sum - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size))


@dataclass
class OodSeparation:
    auroc: float
    bin_edges: np.ndarray
    id_hist: np.ndarray
    ood_hist: np.ndarray
    id_mean: float
    ood_mean: float

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "bin_edges": self.bin_edges.tolist(),
            "id_hist": self.id_hist.tolist(),
            "ood_hist": self.ood_hist.tolist(),
            "id_mean_covariance": self.id_mean,
            "ood_mean_covariance": self.ood_mean,
        }


def ood_separation(id_results: RetrievalResult, ood_results: RetrievalResult, bins: int = 30) -> OodSeparation:
    """Histograms of the NN covariance score for ID/OOD queries and its AUROC."""
    id_cov = id_results.nn_covariance
    ood_cov = ood_results.nn_covariance
    if id_cov.size == 0 or ood_cov.size == 0:
        raise ValueError("both query sets must be nonempty")
    edges = np.histogram_bin_edges(np.concatenate([id_cov, ood_cov]), bins=bins)
    return OodSeparation(
        auroc=auroc(id_cov, ood_cov),
        bin_edges=edges,
        id_hist=np.histogram(id_cov, edges)[0],
        ood_hist=np.histogram(ood_cov, edges)[0],
        id_mean=float(id_cov.mean()),
        ood_mean=float(ood_cov.mean()),
    )
