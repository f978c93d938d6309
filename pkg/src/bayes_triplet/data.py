"""Synthetic heteroscedastic retrieval data.

Class centres are standard normal in input space. Each item is
``centre + sigma_gen * eps`` with a per-item difficulty ``sigma_gen`` drawn from
the noise profile and kept as ground truth. Two noise models are provided:

``background``  eps = (b - centre) with b a random low-contrast background
                pattern, so sigma_gen blends the item into clutter shared by all
                classes; a small fixed jitter is added on top.
``isotropic``   eps ~ N(0, I). In high dimension this makes noisy items
                outliers that are far from every class rather than ambiguous.

Classes are split into disjoint train and test sets, so evaluation is on
classes never seen during training.
"""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass

import numpy as np

NOISE_MODELS = ("background", "isotropic")
DEFAULT_NOISE = (0.0, 1.0)
BACKGROUND_SCALE = 0.5
JITTER = 0.1


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named sub-stream of ``seed``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class SyntheticDataset:
    inputs: np.ndarray
    labels: np.ndarray
    noise: np.ndarray
    train_classes: np.ndarray
    test_classes: np.ndarray

    def __post_init__(self):
        if np.intersect1d(self.train_classes, self.test_classes).size:
            raise ValueError("train and test classes overlap")
        _, counts = np.unique(self.labels, return_counts=True)
        if counts.min() < 2:
            raise ValueError("every class needs at least two items")

    @property
    def n_classes(self) -> int:
        return int(np.unique(self.labels).size)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def __len__(self) -> int:
        return self.labels.size

    def split_indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(len(self))
        classes = {"train": self.train_classes, "test": self.test_classes}[split]
        return np.flatnonzero(np.isin(self.labels, classes))

    def items(self, split: str = "all"):
        for i in self.split_indices(split):
            yield self.inputs[i], int(self.labels[i]), float(self.noise[i])

    def to_csv(self, split: str = "all") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "label", "noise"] + [f"x_{d + 1}" for d in range(self.input_dim)])
        for i in self.split_indices(split):
            writer.writerow([i, int(self.labels[i]), repr(float(self.noise[i]))] + [repr(float(v)) for v in self.inputs[i]])
        return buf.getvalue()


def _noisy_items(rng, centres, noise, noise_model):
    n, dim = centres.shape
    if noise_model == "isotropic":
        eps = rng.standard_normal((n, dim))
        return centres + noise[:, None] * eps
    if noise_model == "background":
        background = BACKGROUND_SCALE * rng.standard_normal((n, dim))
        jitter = JITTER * rng.standard_normal((n, dim))
        return centres + noise[:, None] * (background - centres) + jitter
    raise ValueError(f"noise_model must be one of {NOISE_MODELS}")


def _check_profile(noise_profile):
    lo, hi = noise_profile
    if not 0 <= lo <= hi:
        raise ValueError("noise profile must satisfy 0 <= low <= high")
    return lo, hi


def generate_synthetic_dataset(
    n_classes: int = 128,
    per_class: int = 40,
    input_dim: int = 32,
    noise_profile=DEFAULT_NOISE,
    seed: int = 0,
    train_fraction: float = 0.5,
    noise_model: str = "background",
) -> SyntheticDataset:
    """Draw a dataset; the first ``train_fraction`` of classes form the train split.

    An all-zero noise profile gives items equal to their class centres under
    the isotropic model (the background model keeps its small jitter).
    """
    if n_classes < 4:
        raise ValueError("need at least 4 classes")
    if per_class < 2:
        raise ValueError("need at least 2 items per class")
    lo, hi = _check_profile(noise_profile)
    rng = np.random.default_rng([int(seed), zlib.crc32(b"dataset")])
    centres = rng.standard_normal((n_classes, input_dim))
    labels = np.repeat(np.arange(n_classes), per_class)
    noise = rng.uniform(lo, hi, size=labels.size)
    inputs = _noisy_items(rng, centres[labels], noise, noise_model)
    n_train = int(round(train_fraction * n_classes))
    n_train = min(max(n_train, 2), n_classes - 2)
    classes = np.arange(n_classes)
    return SyntheticDataset(inputs, labels, noise, classes[:n_train], classes[n_train:])


def generate_ood_inputs(
    n: int,
    input_dim: int,
    centre_scale: float = 0.5,
    noise_profile=DEFAULT_NOISE,
    seed: int = 0,
    noise_model: str = "background",
) -> tuple[np.ndarray, np.ndarray]:
    """Queries from a shifted input distribution: class centres drawn with
    standard deviation ``centre_scale`` instead of 1.

    The default shrinks the centres, i.e. a low-contrast domain whose items
    carry weaker class structure than anything seen in training. Returns
    ``(inputs, noise)``; every OOD query is its own class, so it has no
    relevant item in an in-distribution database.
    """
    _check_profile(noise_profile)
    rng = np.random.default_rng([int(seed), zlib.crc32(b"ood")])
    centres = centre_scale * rng.standard_normal((n, input_dim))
    noise = rng.uniform(*noise_profile, size=n)
    return _noisy_items(rng, centres, noise, noise_model), noise
