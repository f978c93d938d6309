"""Two-head MLP encoder with hand-written backpropagation.

A shared tanh trunk feeds a mean head (one affine map) and a variance head
(affine, ReLU, affine to a scalar, softplus). Three output conventions:

``gauss``  mean = exp(log_scale) * head output, variance = softplus(.)
``vmf``    direction = normalised head output, concentration = softplus(.)
``hinge``  l2-normalised point embedding, no variance head

Parameters live in a flat ``dict[str, ndarray]`` so that optimisers,
checkpoints and finite-difference checks can treat them uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .stochastic import GaussianEmbedding, VmfEmbedding

KINDS = ("gauss", "vmf", "hinge")
VARIANCE_EPS = 1e-6
CHECKPOINT_VERSION = 1


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class EncoderParams:
    kind: str
    input_dim: int
    hidden: tuple[int, ...]
    embed_dim: int
    var_hidden: int
    weights: dict[str, np.ndarray]

    @property
    def n_trunk(self) -> int:
        return len(self.hidden)

    @property
    def output_dim(self) -> int:
        """Total number of output parameters per item (mean plus variance)."""
        return self.embed_dim + (0 if self.kind == "hinge" else 1)

    @property
    def mean_scale(self) -> float:
        return float(np.exp(self.weights["log_scale"][0])) if "log_scale" in self.weights else 1.0

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.kind,
            self.input_dim,
            self.hidden,
            self.embed_dim,
            self.var_hidden,
            {k: v.copy() for k, v in self.weights.items()},
        )

    def n_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())

    def to_json(self) -> str:
        payload = {
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "embed_dim": self.embed_dim,
            "var_hidden": self.var_hidden,
            "weights": {
                name: {"shape": list(w.shape), "data": [repr(float(x)) for x in w.ravel()]}
                for name, w in sorted(self.weights.items())
            },
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EncoderParams":
        p = json.loads(text)
        if p.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {p.get('version')}")
        weights = {
            name: np.array([float(x) for x in w["data"]], dtype=np.float64).reshape(w["shape"])
            for name, w in p["weights"].items()
        }
        return cls(p["kind"], p["input_dim"], tuple(p["hidden"]), p["embed_dim"], p["var_hidden"], weights)


def init_encoder(
    kind: str,
    input_dim: int,
    embed_dim: int,
    hidden=(64,),
    var_hidden: int = 16,
    seed=0,
) -> EncoderParams:
    """Glorot-normal initialisation.

    ``embed_dim`` is the full output budget D: probabilistic encoders get a
    mean head of size D - 1 plus the scalar variance, the hinge baseline a
    D-dimensional point embedding.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if not 1 <= len(hidden) <= 2:
        raise ValueError("trunk must have one or two hidden layers")
    rng = np.random.default_rng(seed)
    mean_dim = embed_dim if kind == "hinge" else embed_dim - 1
    if mean_dim < (2 if kind != "gauss" else 1):
        raise ValueError("embedding dimension too small")

    def dense(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))

    weights = {}
    width = input_dim
    for i, h in enumerate(hidden):
        weights[f"trunk{i}_W"] = dense(width, h)
        weights[f"trunk{i}_b"] = np.zeros(h)
        width = h
    weights["mean_W"] = dense(width, mean_dim)
    weights["mean_b"] = np.zeros(mean_dim)
    if kind != "hinge":
        weights["var0_W"] = dense(width, var_hidden)
        weights["var0_b"] = np.zeros(var_hidden)
        weights["var1_W"] = dense(var_hidden, 1)
        weights["var1_b"] = np.zeros(1)
    if kind == "gauss":
        weights["log_scale"] = np.zeros(1)
    return EncoderParams(kind, input_dim, tuple(hidden), mean_dim, var_hidden, weights)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    trunk: list[np.ndarray]
    raw_mean: np.ndarray
    raw_norm: np.ndarray | None
    var_pre: np.ndarray | None
    var_act: np.ndarray | None
    var_out: np.ndarray | None


@dataclass
class EncoderOutput:
    """Batched outputs. ``mean`` holds the direction for vMF/hinge encoders and
    ``spread`` the variance (gauss) or concentration (vmf)."""

    mean: np.ndarray
    spread: np.ndarray | None
    cache: ForwardCache


def forward(params: EncoderParams, inputs) -> EncoderOutput:
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != params.input_dim:
        raise ValueError(f"input dimension {x.shape[1]} != encoder input {params.input_dim}")
    w = params.weights
    h = x
    trunk = []
    for i in range(params.n_trunk):
        h = np.tanh(h @ w[f"trunk{i}_W"] + w[f"trunk{i}_b"])
        trunk.append(h)
    raw = h @ w["mean_W"] + w["mean_b"]

    raw_norm = None
    if params.kind == "gauss":
        mean = params.mean_scale * raw
    else:
        raw_norm = np.linalg.norm(raw, axis=1, keepdims=True)
        mean = raw / raw_norm

    var_pre = var_act = var_out = spread = None
    if params.kind != "hinge":
        var_pre = h @ w["var0_W"] + w["var0_b"]
        var_act = np.maximum(var_pre, 0.0)
        var_out = (var_act @ w["var1_W"] + w["var1_b"])[:, 0]
        spread = softplus(var_out) + VARIANCE_EPS
    cache = ForwardCache(x, trunk, raw, raw_norm, var_pre, var_act, var_out)
    return EncoderOutput(mean, spread, cache)


def backward(params: EncoderParams, out: EncoderOutput, d_mean, d_spread=None) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients w.r.t. ``out.mean`` and ``out.spread``."""
    w = params.weights
    c = out.cache
    d_mean = np.asarray(d_mean, dtype=np.float64)
    grads = {}

    if params.kind == "gauss":
        scale = params.mean_scale
        d_raw = scale * d_mean
        grads["log_scale"] = np.array([float((d_mean * out.mean).sum())])
    else:
        y = out.mean
        d_raw = (d_mean - y * (y * d_mean).sum(axis=1, keepdims=True)) / c.raw_norm

    h = c.trunk[-1]
    grads["mean_W"] = h.T @ d_raw
    grads["mean_b"] = d_raw.sum(axis=0)
    d_h = d_raw @ w["mean_W"].T

    if params.kind != "hinge":
        d_spread = np.zeros(len(c.inputs)) if d_spread is None else np.asarray(d_spread, dtype=np.float64)
        d_out = (d_spread * sigmoid(c.var_out))[:, None]
        grads["var1_W"] = c.var_act.T @ d_out
        grads["var1_b"] = d_out.sum(axis=0)
        d_pre = (d_out @ w["var1_W"].T) * (c.var_pre > 0)
        grads["var0_W"] = h.T @ d_pre
        grads["var0_b"] = d_pre.sum(axis=0)
        d_h = d_h + d_pre @ w["var0_W"].T

    for i in reversed(range(params.n_trunk)):
        h_i = c.trunk[i]
        d_a = d_h * (1.0 - h_i * h_i)
        below = c.trunk[i - 1] if i > 0 else c.inputs
        grads[f"trunk{i}_W"] = below.T @ d_a
        grads[f"trunk{i}_b"] = d_a.sum(axis=0)
        d_h = d_a @ w[f"trunk{i}_W"].T
    return grads


def encoder_forward(params: EncoderParams, inputs):
    """Embed a batch (or single input) as GaussianEmbedding / VmfEmbedding objects.

    The hinge encoder returns zero-variance Gaussians wrapping its point embedding.
    """
    single = np.asarray(inputs).ndim == 1
    out = forward(params, inputs)
    if params.kind == "gauss":
        embs = [GaussianEmbedding(m, v) for m, v in zip(out.mean, out.spread)]
    elif params.kind == "vmf":
        embs = [VmfEmbedding(m, k) for m, k in zip(out.mean, out.spread)]
    else:
        embs = [GaussianEmbedding(m, 0.0, exact=True) for m in out.mean]
    return embs[0] if single else embs


def encoder_backward(params: EncoderParams, inputs, d_mean, d_spread=None) -> dict[str, np.ndarray]:
    """Forward ``inputs`` and backpropagate the given output gradients."""
    return backward(params, forward(params, inputs), d_mean, d_spread)


def flatten(weights: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([weights[k].ravel() for k in sorted(weights)])


def unflatten(params: EncoderParams, vec: np.ndarray) -> EncoderParams:
    out = params.copy()
    offset = 0
    for k in sorted(out.weights):
        size = out.weights[k].size
        out.weights[k] = np.asarray(vec[offset : offset + size], dtype=np.float64).reshape(out.weights[k].shape)
        offset += size
    return out
