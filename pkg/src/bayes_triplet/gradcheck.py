"""Finite-difference audit of every hand-derived gradient in the package."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .data import stream_rng
from .gradients import finite_diff_check, kl_grad_arrays, nll_and_grad_arrays, triplet_to_vector
from .mc import random_triplet
from .priors import kl_gaussian_arrays, vmf_batch_terms
from .trainer import batch_loss_and_grads

CLOSED_FORM_TOL = 1e-5
ENCODER_TOL = 1e-4
COMPONENTS = ("nll", "kl_gauss", "kl_vmf", "encoder")
FAULTS = (None,) + COMPONENTS


@dataclass
class ComponentResult:
    threshold: float
    errors: list[float] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max(self.errors, default=0.0)

    def to_dict(self) -> dict:
        return {
            "n": len(self.errors),
            "max_rel_error": self.max_rel_error,
            "threshold": self.threshold,
            "failures": self.failures,
        }


@dataclass
class GradcheckReport:
    components: dict[str, ComponentResult]

    @property
    def ok(self) -> bool:
        return not any(c.failures for c in self.components.values())

    def to_dict(self) -> dict:
        return {"ok": self.ok, "components": {k: v.to_dict() for k, v in self.components.items()}}


def _nll_of_vector(dim: int, m: float):
    def f(vec):
        mus = vec[: 3 * dim].reshape(3, dim)
        return float(nll_and_grad_arrays(*mus, *vec[3 * dim :], m)[0])

    return f


def _record(result: ComponentResult, rep, case: dict):
    err = rep.max_rel_error
    result.errors.append(err)
    if not (err < result.threshold) or rep.nonfinite:
        result.failures.append({**case, "max_rel_error": err})


def check_nll(rng, dim: int, fault: bool = False):
    t = random_triplet(dim, rng)
    m = float(rng.uniform(0.0, 1.0))
    vec = triplet_to_vector(t)
    _, *grads = nll_and_grad_arrays(*vec[: 3 * dim].reshape(3, dim), *vec[3 * dim :], m)
    analytic = np.concatenate([np.ravel(g) for g in grads])
    if fault:
        analytic = -analytic
    return finite_diff_check(_nll_of_vector(dim, m), vec, analytic), {"dim": dim, "margin": m, "point": vec.tolist()}


def check_kl_gauss(rng, dim: int, fault: bool = False):
    mu = rng.standard_normal(dim) / np.sqrt(dim)
    var = float(np.abs(rng.standard_normal())) / dim + 1e-3
    point = np.append(mu, var)
    d_mu, d_var = kl_grad_arrays(mu, var)
    analytic = np.append(d_mu, d_var)
    if fault:
        analytic = -analytic
    rep = finite_diff_check(lambda v: float(kl_gaussian_arrays(v[:-1], v[-1])), point, analytic, step=1e-5, richardson=True)
    return rep, {"dim": dim, "point": point.tolist()}


def check_kl_vmf(rng, dim: int, fault: bool = False):
    dim = max(dim, 2)
    kappa = float(np.exp(rng.uniform(np.log(0.1), np.log(500.0))))
    _, da, _ = vmf_batch_terms(dim, np.array([kappa]))
    analytic = kappa * da
    if fault:
        analytic = -analytic
    rep = finite_diff_check(
        lambda v: float(vmf_batch_terms(dim, v)[2][0]), [kappa], analytic, step=1e-4 * max(kappa, 1.0)
    )
    return rep, {"dim": dim, "kappa": kappa}


def _kink_distance(params, x, ia, ip, ineg, m) -> float:
    """Distance of the instance to the nearest ReLU or hinge kink."""
    out = enc.forward(params, x)
    dist = np.inf
    if out.cache.var_pre is not None:
        dist = float(np.abs(out.cache.var_pre).min())
    if params.kind == "hinge":
        e = out.mean
        slack = ((e[ia] - e[ip]) ** 2).sum(axis=1) - ((e[ia] - e[ineg]) ** 2).sum(axis=1) + m
        dist = min(dist, float(np.abs(slack).min()))
    return dist


def check_encoder(rng, dim: int, fault: bool = False):
    kind = ("gauss", "vmf", "hinge")[int(rng.integers(3))]
    embed = int(min(max(dim, 3), 8))
    while True:
        # redraw instances on a kink (gradient undefined) or with every hinge inactive
        params = enc.init_encoder(kind, 5, embed, hidden=(7,), var_hidden=4, seed=rng)
        for k in params.weights:
            params.weights[k] = params.weights[k] + 0.1 * rng.standard_normal(params.weights[k].shape)
        x = rng.standard_normal((6, 5))
        ia, ip, ineg = rng.integers(0, 6, (3, 5))
        m = float(rng.uniform(0.0, 0.5))
        if _kink_distance(params, x, ia, ip, ineg, m) <= 1e-2:
            continue
        _, _, _, grads = batch_loss_and_grads(params, x, ia, ip, ineg, m, 0.1)
        analytic = enc.flatten(grads)
        if np.any(analytic != 0):
            break
    if fault:
        analytic = -analytic

    def f(vec):
        return batch_loss_and_grads(enc.unflatten(params, vec), x, ia, ip, ineg, m, 0.1)[0]

    rep = finite_diff_check(f, enc.flatten(params.weights), analytic, step=1e-4, richardson=True)
    return rep, {"kind": kind, "embed_dim": embed, "margin": m}


_CHECKS = {"nll": check_nll, "kl_gauss": check_kl_gauss, "kl_vmf": check_kl_vmf, "encoder": check_encoder}


def run_gradcheck(trials: int = 100, dims=(2, 8, 64), seed: int = 0, fault: str | None = None) -> GradcheckReport:
    """Run ``trials`` random instances per component, cycling through ``dims``.

    ``fault`` negates the analytic gradient of one component; the harness
    must then report a failure.
    """
    if fault not in FAULTS:
        raise ValueError(f"fault must be one of {FAULTS}")
    dims = list(dims)
    if not dims or trials < 1:
        raise ValueError("need at least one dimension and one trial")
    components = {}
    for name, check in _CHECKS.items():
        rng = stream_rng(seed, f"gradcheck/{name}")
        result = ComponentResult(ENCODER_TOL if name == "encoder" else CLOSED_FORM_TOL)
        for trial in range(trials):
            rep, case = check(rng, dims[trial % len(dims)], fault == name)
            _record(result, rep, {"trial": trial, **case})
        components[name] = result
    return GradcheckReport(components)
