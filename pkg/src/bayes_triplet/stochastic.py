"""Stochastic embeddings, triplets and deterministic distance utilities.

An embedding is an isotropic distribution in feature space: either a Gaussian
``N(mean, variance * I)`` or a von Mises-Fisher distribution on the unit sphere.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

VARIANCE_FLOOR = 1e-12
UNIT_NORM_TOL = 1e-9


class DegenerateEmbeddingError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


def _as_vector(values) -> np.ndarray:
    vec = np.array(values, dtype=np.float64).reshape(-1)
    if vec.size < 1:
        raise ValueError("embedding must have dimension >= 1")
    if not np.all(np.isfinite(vec)):
        raise ValueError("embedding mean has non-finite entries")
    vec.setflags(write=False)
    return vec


@dataclass(frozen=True, eq=False)
class GaussianEmbedding:
    """Isotropic Gaussian feature ``N(mean, variance * I_D)``.

    ``variance`` is clamped from below at ``VARIANCE_FLOOR``; pass
    ``exact=True`` to keep an exact zero (deterministic point embedding).
    """

    mean: np.ndarray
    variance: float

    def __init__(self, mean, variance: float, exact: bool = False):
        variance = float(variance)
        if not np.isfinite(variance) or variance < 0:
            raise ValueError(f"variance must be finite and >= 0, got {variance}")
        if not exact:
            variance = max(variance, VARIANCE_FLOOR)
        object.__setattr__(self, "mean", _as_vector(mean))
        object.__setattr__(self, "variance", variance)

    @property
    def dim(self) -> int:
        return self.mean.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, GaussianEmbedding):
            return NotImplemented
        return self.variance == other.variance and np.array_equal(self.mean, other.mean)

    def __repr__(self) -> str:
        return f"GaussianEmbedding(dim={self.dim}, variance={self.variance:.6g})"

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "variance": self.variance}

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianEmbedding":
        return cls(data["mean"], data["variance"], exact=True)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GaussianEmbedding":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class VmfEmbedding:
    """von Mises-Fisher feature with unit ``direction`` and concentration ``kappa``."""

    direction: np.ndarray
    concentration: float

    def __init__(self, direction, concentration: float):
        vec = _as_vector(direction)
        if abs(np.linalg.norm(vec) - 1.0) > UNIT_NORM_TOL:
            raise ValueError("vMF direction must have unit norm")
        concentration = float(concentration)
        if not np.isfinite(concentration) or concentration < 0:
            raise ValueError(f"concentration must be finite and >= 0, got {concentration}")
        object.__setattr__(self, "direction", vec)
        object.__setattr__(self, "concentration", concentration)

    @property
    def dim(self) -> int:
        return self.direction.size

    def __repr__(self) -> str:
        return f"VmfEmbedding(dim={self.dim}, concentration={self.concentration:.6g})"


@dataclass(frozen=True)
class Triplet:
    anchor: GaussianEmbedding
    positive: GaussianEmbedding
    negative: GaussianEmbedding

    def __post_init__(self):
        dims = {self.anchor.dim, self.positive.dim, self.negative.dim}
        if len(dims) != 1:
            raise DimensionMismatchError(f"triplet members have dimensions {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.anchor.dim


@dataclass(frozen=True)
class TripletLabel:
    """Number of images in a triplet that share a class (1, 2 or 3)."""

    value: int

    def __post_init__(self):
        if self.value not in (1, 2, 3):
            raise ValueError(f"triplet label must be 1, 2 or 3, got {self.value}")

    @classmethod
    def from_classes(cls, x, y, z) -> "TripletLabel":
        # all distinct -> 1, exactly one pair -> 2, all equal -> 3
        return cls(4 - len({x, y, z}))

    @property
    def informative(self) -> bool:
        return self.value == 2


def _check_dims(q, x):
    if q.dim != x.dim:
        raise DimensionMismatchError(f"dimension mismatch: {q.dim} vs {x.dim}")


def normalize_mean(e: GaussianEmbedding) -> GaussianEmbedding:
    norm = np.linalg.norm(e.mean)
    if norm == 0:
        raise DegenerateEmbeddingError("degenerate embedding: zero-norm mean")
    return GaussianEmbedding(e.mean / norm, e.variance, exact=True)


def expected_sq_distance(q: GaussianEmbedding, x: GaussianEmbedding) -> float:
    """``E||q - x||^2 = ||mu_q - mu_x||^2 + D (var_q + var_x)`` for independent q, x."""
    _check_dims(q, x)
    diff = q.mean - x.mean
    return float(diff @ diff + q.dim * (q.variance + x.variance))


def sq_distance_of_means(q: GaussianEmbedding, x: GaussianEmbedding) -> float:
    _check_dims(q, x)
    diff = q.mean - x.mean
    return float(diff @ diff)


# -- serialization -----------------------------------------------------------
#
# CSV rows are ``id,variance,mean_1,...,mean_D`` with a header line.


def embeddings_to_csv(ids: Iterable, embeddings: Iterable[GaussianEmbedding]) -> str:
    embeddings = list(embeddings)
    ids = list(ids)
    if len(ids) != len(embeddings):
        raise ValueError("ids and embeddings differ in length")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    dim = embeddings[0].dim if embeddings else 0
    writer.writerow(["id", "variance"] + [f"mu_{d + 1}" for d in range(dim)])
    for ident, emb in zip(ids, embeddings):
        if emb.dim != dim:
            raise DimensionMismatchError("all embeddings in a file must share a dimension")
        writer.writerow([ident, repr(emb.variance)] + [repr(float(v)) for v in emb.mean])
    return buf.getvalue()


def embeddings_from_csv(text: str) -> tuple[list[str], list[GaussianEmbedding]]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or header[:2] != ["id", "variance"]:
        raise ValueError("embedding CSV must start with header 'id,variance,mu_1,...'")
    ids, embs = [], []
    for row in reader:
        if not row:
            continue
        ids.append(row[0])
        embs.append(GaussianEmbedding([float(v) for v in row[2:]], float(row[1]), exact=True))
    return ids, embs
