"""ELBO training of the two-head encoder with cached hard-negative mining.

The per-triplet objective is the closed-form negative log-likelihood of the
triplet constraint plus ``kl_scale`` times the KL of each member to the prior.
The likelihood is an analytic function of the variational parameters, so no
sampling happens during training. vMF embeddings enter the likelihood through
their moment-matched isotropic Gaussian.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import encoder as enc
from .data import SyntheticDataset, stream_rng
from .gradients import kl_grad_arrays, nll_and_grad_arrays
from .metrics import RetrievalResult, recall_at_k, retrieve_arrays
from .priors import kl_gaussian_arrays, vmf_batch_terms
from .stochastic import GaussianEmbedding, Triplet

log = logging.getLogger(__name__)

LOSSES = {"bayes-gauss": "gauss", "bayes-vmf": "vmf", "hinge": "hinge"}
HISTORY_FIELDS = ("epoch", "loss", "nll", "kl", "val_r1", "lr")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, params=None, history=None):
        super().__init__(message)
        self.params = params
        self.history = history


@dataclass
class TrainConfig:
    loss: str = "bayes-gauss"
    lr: float = 1e-3
    weight_decay: float = 1e-3
    lr_decay: float = 0.99
    batch_triplets: int = 25
    negatives_per_anchor: int = 5
    margin: float = 0.2
    mining_margin: float | None = None
    kl_scale: float = 1e-6
    cache_size: int = 1000
    cache_refresh: int = 50
    epochs: int = 30
    seed: int = 0
    embed_dim: int = 32
    hidden: tuple[int, ...] = (64,)
    var_hidden: int = 16
    negative_reduction: str = "sum"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}")
        if self.negative_reduction not in ("sum", "hardest"):
            raise ValueError("negative_reduction must be 'sum' or 'hardest'")
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("lr", "batch_triplets", "negatives_per_anchor", "cache_size", "cache_refresh", "epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.weight_decay < 0 or self.kl_scale < 0 or self.margin < 0:
            raise ValueError("weight_decay, kl_scale and margin must be >= 0")

    @property
    def kind(self) -> str:
        return LOSSES[self.loss]

    @property
    def prior(self) -> str:
        return {"gauss": "gaussian_unit_sphere", "vmf": "uniform_sphere", "hinge": "none"}[self.kind]

    @property
    def resolved_mining_margin(self) -> float:
        return float(self.margin) if self.mining_margin is None else float(self.mining_margin)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for r in self.rows:
            writer.writerow([r["epoch"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])
        return buf.getvalue()


# -- mining --------------------------------------------------------------------


@dataclass
class MiningCache:
    ids: np.ndarray
    labels: np.ndarray
    means: np.ndarray
    spreads: np.ndarray | None
    staleness: int = 0

    def __len__(self) -> int:
        return self.ids.size


def refresh_cache(cache, params: enc.EncoderParams, dataset: SyntheticDataset, n_new: int, seed=None, pool=None) -> MiningCache:
    """Embed ``n_new`` items drawn without replacement from ``pool`` (default: train split)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pool = dataset.split_indices("train") if pool is None else np.asarray(pool)
    if n_new > pool.size:
        warnings.warn(f"cache size {n_new} exceeds pool size {pool.size}; capped", RuntimeWarning, stacklevel=2)
        n_new = pool.size
    ids = np.sort(rng.choice(pool, size=n_new, replace=False))
    out = enc.forward(params, dataset.inputs[ids])
    return MiningCache(ids, dataset.labels[ids], out.mean, out.spread, 0)


def hard_negative_positions(cache: MiningCache, anchor_means, positive_means, anchor_labels, k: int, margin: float):
    """For each anchor, cache positions of its k nearest negatives that violate
    ``||a - p||^2 < ||a - n||^2 - margin``; returns a list of index arrays."""
    anchor_means = np.atleast_2d(anchor_means)
    positive_means = np.atleast_2d(positive_means)
    anchor_labels = np.atleast_1d(anchor_labels)
    diff = anchor_means[:, None, :] - cache.means[None, :, :]
    d_an = np.einsum("bcd,bcd->bc", diff, diff)
    d_an[anchor_labels[:, None] == cache.labels[None, :]] = np.inf
    d_ap = ((anchor_means - positive_means) ** 2).sum(axis=1)
    k = min(k, len(cache))
    nearest = np.argsort(d_an, axis=1, kind="stable")[:, :k]
    out = []
    for row, cand in enumerate(nearest):
        dist = d_an[row, cand]
        keep = np.isfinite(dist) & (d_ap[row] >= dist - margin)
        out.append(cand[keep])
    return out


def mine_hard_negatives(
    cache: MiningCache,
    anchor: GaussianEmbedding,
    positive: GaussianEmbedding,
    anchor_label,
    k: int,
    margin: float = 0.0,
) -> list[Triplet]:
    """Triplets (anchor, positive, cached negative) that violate the margin constraint.

    Negatives are the ``k`` cached items of another class nearest to the anchor
    mean; only violating ones are returned, so the list may be shorter than k.
    """
    pos = hard_negative_positions(cache, anchor.mean, positive.mean, [anchor_label], k, margin)[0]
    spreads = cache.spreads if cache.spreads is not None else np.zeros(len(cache))
    return [Triplet(anchor, positive, GaussianEmbedding(cache.means[i], spreads[i], exact=True)) for i in pos]


# -- losses --------------------------------------------------------------------


def _gauss_loss(out: enc.EncoderOutput, ia, ip, ineg, margin, kl_scale):
    mu, var = out.mean, out.spread
    t = ia.size
    loss_nll, dma, dmp, dmn, dva, dvp, dvn = nll_and_grad_arrays(
        mu[ia], mu[ip], mu[ineg], var[ia], var[ip], var[ineg], margin
    )
    kl_items = kl_gaussian_arrays(mu, var)
    kl_mu, kl_var = kl_grad_arrays(mu, var)
    counts = np.bincount(np.concatenate([ia, ip, ineg]), minlength=mu.shape[0]).astype(np.float64)
    nll_mean = float(loss_nll.mean())
    kl_mean = float((counts * kl_items).sum() / t)

    d_mu = np.zeros_like(mu)
    d_var = np.zeros_like(var)
    for idx, g_mu, g_var in ((ia, dma, dva), (ip, dmp, dvp), (ineg, dmn, dvn)):
        np.add.at(d_mu, idx, g_mu / t)
        np.add.at(d_var, idx, g_var / t)
    d_mu += kl_scale * counts[:, None] * kl_mu / t
    d_var += kl_scale * counts * kl_var / t
    return nll_mean, kl_mean, d_mu, d_var


def _vmf_loss(out: enc.EncoderOutput, ia, ip, ineg, margin, kl_scale):
    direction, kappa = out.mean, out.spread
    dim = direction.shape[1]
    t = ia.size
    a_res, a_der, kl_items = vmf_batch_terms(dim, kappa)
    mu = a_res[:, None] * direction
    var = (1.0 - a_res**2) / dim
    loss_nll, dma, dmp, dmn, dva, dvp, dvn = nll_and_grad_arrays(
        mu[ia], mu[ip], mu[ineg], var[ia], var[ip], var[ineg], margin
    )
    counts = np.bincount(np.concatenate([ia, ip, ineg]), minlength=direction.shape[0]).astype(np.float64)
    kl_der = kappa * a_der

    d_mu = np.zeros_like(mu)
    d_var = np.zeros_like(var)
    for idx, g_mu, g_var in ((ia, dma, dva), (ip, dmp, dvp), (ineg, dmn, dvn)):
        np.add.at(d_mu, idx, g_mu / t)
        np.add.at(d_var, idx, g_var / t)
    d_dir = a_res[:, None] * d_mu
    d_kappa = a_der * ((direction * d_mu).sum(axis=1) - 2.0 * a_res / dim * d_var)
    d_kappa += kl_scale * counts * kl_der / t
    return float(loss_nll.mean()), float((counts * kl_items).sum() / t), d_dir, d_kappa


def _hinge_loss(out: enc.EncoderOutput, ia, ip, ineg, margin):
    e = out.mean
    t = ia.size
    d_ap = e[ia] - e[ip]
    d_an = e[ia] - e[ineg]
    slack = (d_ap**2).sum(axis=1) - (d_an**2).sum(axis=1) + margin
    active = (slack > 0).astype(np.float64)[:, None] / t
    d_e = np.zeros_like(e)
    np.add.at(d_e, ia, 2.0 * active * (e[ineg] - e[ip]))
    np.add.at(d_e, ip, -2.0 * active * d_ap)
    np.add.at(d_e, ineg, 2.0 * active * d_an)
    return float(np.maximum(slack, 0.0).mean()), 0.0, d_e, None


def batch_loss_and_grads(params: enc.EncoderParams, inputs, ia, ip, ineg, margin: float, kl_scale: float):
    """Loss of a batch of triplets given as row indices into ``inputs``.

    Returns ``(loss, nll, kl, grads)`` with ``loss = nll + kl_scale * kl`` where
    ``nll`` is the batch mean and ``kl`` the batch mean of the summed member KLs.
    """
    out = enc.forward(params, inputs)
    ia, ip, ineg = (np.asarray(i, dtype=np.int64) for i in (ia, ip, ineg))
    if params.kind == "gauss":
        nll, kl, d_mean, d_spread = _gauss_loss(out, ia, ip, ineg, margin, kl_scale)
    elif params.kind == "vmf":
        nll, kl, d_mean, d_spread = _vmf_loss(out, ia, ip, ineg, margin, kl_scale)
    else:
        nll, kl, d_mean, d_spread = _hinge_loss(out, ia, ip, ineg, margin)
    grads = enc.backward(params, out, d_mean, d_spread)
    return nll + kl_scale * kl, nll, kl, grads


# -- optimisation ----------------------------------------------------------------


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, weights: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}
        self.t = 0

    def step(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in sorted(weights):
            g = grads[k] + self.weight_decay * weights[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            weights[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# -- evaluation helpers --------------------------------------------------------------


def embed_arrays(params: enc.EncoderParams, inputs) -> tuple[np.ndarray, np.ndarray]:
    """Retrieval means and isotropic variances.

    vMF outputs are reported through their moment-matched Gaussian, hinge
    outputs with zero variance.
    """
    out = enc.forward(params, inputs)
    if params.kind == "gauss":
        return out.mean, out.spread
    if params.kind == "vmf":
        dim = out.mean.shape[1]
        a = vmf_batch_terms(dim, out.spread)[0]
        return a[:, None] * out.mean, (1.0 - a**2) / dim
    return out.mean, np.zeros(out.mean.shape[0])


def evaluate_split(params, dataset: SyntheticDataset, split: str = "test", k: int = 10, mode: str = "means") -> RetrievalResult:
    """Leave-one-out retrieval within a split."""
    idx = dataset.split_indices(split)
    means, variances = embed_arrays(params, dataset.inputs[idx])
    labels = dataset.labels[idx]
    return retrieve_arrays(means, variances, labels, means, variances, labels, k, mode, exclude_self=True)


# -- training loop -------------------------------------------------------------------


def _class_index(labels: np.ndarray, idx: np.ndarray) -> dict[int, np.ndarray]:
    return {int(c): idx[labels[idx] == c] for c in np.unique(labels[idx])}


def train(config: TrainConfig, dataset: SyntheticDataset):
    """Train an encoder; returns ``(params, history)``.

    One epoch is one pass over all train anchors. The learning rate decays by
    ``lr_decay`` after every epoch and the mining cache is refreshed every
    ``cache_refresh`` iterations.
    """
    seed = config.seed
    init_rng = stream_rng(seed, "init")
    mining_rng = stream_rng(seed, "mining")
    params = enc.init_encoder(
        config.kind, dataset.input_dim, config.embed_dim, config.hidden, config.var_hidden, seed=init_rng
    )
    opt = Adam(params.weights, config.lr, config.weight_decay)
    margin = float(config.margin)
    mining_margin = config.resolved_mining_margin
    kl_scale = config.kl_scale if config.kind != "hinge" else 0.0

    train_idx = dataset.split_indices("train")
    by_class = _class_index(dataset.labels, train_idx)
    cache = refresh_cache(None, params, dataset, config.cache_size, mining_rng, train_idx)
    history = History()
    last_good = params.copy()

    for epoch in range(1, config.epochs + 1):
        order = mining_rng.permutation(train_idx)
        sums = np.zeros(3)
        steps = 0
        for start in range(0, order.size, config.batch_triplets):
            if cache.staleness >= config.cache_refresh:
                cache = refresh_cache(cache, params, dataset, config.cache_size, mining_rng, train_idx)
            anchors = order[start : start + config.batch_triplets]
            positives = np.empty_like(anchors)
            for j, a in enumerate(anchors):
                same = by_class[int(dataset.labels[a])]
                choice = mining_rng.integers(same.size - 1)
                positives[j] = same[choice] if same[choice] != a else same[-1]

            ap_means = enc.forward(params, dataset.inputs[np.concatenate([anchors, positives])]).mean
            if not np.all(np.isfinite(ap_means)):
                # non-finite embeddings would silently fail every mining comparison
                raise TrainingDivergedError(
                    f"non-finite embeddings at epoch {epoch}, step {steps}", params=last_good, history=history
                )
            n_a = anchors.size
            picks = hard_negative_positions(
                cache, ap_means[:n_a], ap_means[n_a:], dataset.labels[anchors], config.negatives_per_anchor, mining_margin
            )
            cache.staleness += 1
            ta, tp, tn = [], [], []
            for j, pos in enumerate(picks):
                if pos.size == 0:
                    continue
                if config.negative_reduction == "hardest":
                    pos = pos[:1]
                ta.extend([anchors[j]] * pos.size)
                tp.extend([positives[j]] * pos.size)
                tn.extend(cache.ids[pos].tolist())
            if not ta:
                continue

            items, inverse = np.unique(np.concatenate([ta, tp, tn]), return_inverse=True)
            t = len(ta)
            ia, ip, ineg = inverse[:t], inverse[t : 2 * t], inverse[2 * t :]
            loss, nll, kl, grads = batch_loss_and_grads(params, dataset.inputs[items], ia, ip, ineg, margin, kl_scale)
            if not (math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {steps}", params=last_good, history=history
                )
            last_good = params.copy()
            opt.step(params.weights, grads)
            sums += (loss, nll, kl)
            steps += 1

        val = evaluate_split(params, dataset, "test", k=1)
        means = sums / max(steps, 1)
        history.append(epoch=epoch, loss=means[0], nll=means[1], kl=means[2], val_r1=recall_at_k(val, 1), lr=opt.lr)
        log.debug("epoch %d loss %.4f val_r1 %.4f", epoch, means[0], history.rows[-1]["val_r1"])
        opt.lr *= config.lr_decay
    return params, history


def train_baseline(config: TrainConfig, dataset: SyntheticDataset):
    """Hinge-loss baseline on l2-normalised point embeddings of the same output size."""
    data = config.to_dict()
    data["loss"] = "hinge"
    return train(TrainConfig.from_dict(data), dataset)
