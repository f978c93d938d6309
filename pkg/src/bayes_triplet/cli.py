"""Command-line entry point: ``btl <command> [flags]``.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Settings resolve as flags > ``--config`` JSON > built-in defaults; a manifest
is itself a valid ``--config`` file, so replaying it reproduces the run.
The seed falls back to the ``BTL_SEED`` environment variable, then 0.

Exit codes: 0 success, 1 analytic or validation failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .data import NOISE_MODELS, generate_ood_inputs, generate_synthetic_dataset
from .encoder import EncoderParams
from .gradcheck import COMPONENTS, run_gradcheck
from .mc import DEFAULT_DIMS, run_approximation_study
from .metrics import (
    MODES,
    calibration_bins,
    ece_at_k,
    map_at_k,
    ood_separation,
    recall_at_k,
    retrieve_arrays,
)
from .stochastic import GaussianEmbedding, embeddings_from_csv, embeddings_to_csv
from .trainer import LOSSES, TrainConfig, TrainingDivergedError, embed_arrays, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


DATASET_DEFAULTS = {
    "n_classes": 128,
    "per_class": 40,
    "input_dim": 32,
    "noise_low": 0.0,
    "noise_high": 1.0,
    "noise_model": "background",
    "train_fraction": 0.5,
}
_TRAIN_DEFAULTS = {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"}

DEFAULTS = {
    "simulate-approx": {"dims": list(DEFAULT_DIMS), "trials": 20, "samples": 100_000},
    "gradcheck": {"dims": [2, 8, 64], "trials": 100, "inject_fault": None},
    "train": {**_TRAIN_DEFAULTS, **DATASET_DEFAULTS},
    "embed": {
        **DATASET_DEFAULTS,
        "checkpoint": None,
        "split": "test",
        "ood_count": 500,
        "ood_scale": 0.5,
        "format": "csv",
    },
    "eval": {
        "db": None,
        "db_labels": None,
        "queries": None,
        "query_labels": None,
        "ood_queries": None,
        "ks": [1, 5, 10],
        "mode": "means",
        "bins": 10,
        "ood_bins": 30,
    },
}
_ALL_KEYS = set().union(*DEFAULTS.values()) | {"seed"}


# -- argument parsing ------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("list must be nonempty")
    return values


def _add(p, *names, **kw):
    p.add_argument(*names, default=argparse.SUPPRESS, **kw)


def _common(p):
    _add(p, "--seed", type=int, help="master seed (fallback: $BTL_SEED, then 0)")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads; 1 is bit-reproducible")
    p.add_argument("--config", type=Path, default=None, help="JSON config or manifest of an earlier run")
    p.add_argument("--out", type=Path, required=True, help="output directory")


def _dataset_flags(p):
    _add(p, "--n-classes", dest="n_classes", type=int)
    _add(p, "--per-class", dest="per_class", type=int)
    _add(p, "--input-dim", dest="input_dim", type=int)
    _add(p, "--noise-low", dest="noise_low", type=float)
    _add(p, "--noise-high", dest="noise_high", type=float)
    _add(p, "--noise-model", dest="noise_model", choices=NOISE_MODELS)
    _add(p, "--train-fraction", dest="train_fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btl", description="Stochastic triplet embeddings: studies, training, evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate-approx", help="Monte Carlo study of the Gaussian approximation of tau")
    _common(p)
    _add(p, "--dims", type=_int_list, help="comma-separated dimensions")
    _add(p, "--trials", type=int, help="random triplets per dimension")
    _add(p, "--samples", type=int, help="Monte Carlo samples per triplet")

    p = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    _common(p)
    _add(p, "--dims", type=_int_list)
    _add(p, "--trials", type=int)
    _add(p, "--inject-fault", dest="inject_fault", choices=COMPONENTS, help=argparse.SUPPRESS)

    p = sub.add_parser("train", help="train an encoder on the synthetic dataset")
    _common(p)
    _dataset_flags(p)
    _add(p, "--loss", choices=sorted(LOSSES))
    _add(p, "--lr", type=float)
    _add(p, "--weight-decay", dest="weight_decay", type=float)
    _add(p, "--lr-decay", dest="lr_decay", type=float)
    _add(p, "--batch-triplets", dest="batch_triplets", type=int)
    _add(p, "--negatives", dest="negatives_per_anchor", type=int)
    _add(p, "--margin", type=float)
    _add(p, "--mining-margin", dest="mining_margin", type=float)
    _add(p, "--kl-scale", dest="kl_scale", type=float)
    _add(p, "--cache-size", dest="cache_size", type=int)
    _add(p, "--cache-refresh", dest="cache_refresh", type=int)
    _add(p, "--epochs", type=int)
    _add(p, "--embed-dim", dest="embed_dim", type=int)
    _add(p, "--hidden", type=_int_list)
    _add(p, "--var-hidden", dest="var_hidden", type=int)
    _add(p, "--negative-reduction", dest="negative_reduction", choices=("sum", "hardest"))

    p = sub.add_parser("embed", help="embed a dataset split with a trained checkpoint")
    _common(p)
    _dataset_flags(p)
    _add(p, "--checkpoint", type=str)
    _add(p, "--split", choices=("train", "test", "all", "ood"))
    _add(p, "--ood-count", dest="ood_count", type=int)
    _add(p, "--ood-scale", dest="ood_scale", type=float)
    _add(p, "--format", choices=("csv", "json"))

    p = sub.add_parser("eval", help="retrieval, calibration and OOD metrics from embedding files")
    _common(p)
    _add(p, "--db", type=str, help="database embeddings (CSV or JSON)")
    _add(p, "--db-labels", dest="db_labels", type=str, help="labels CSV for a CSV database")
    _add(p, "--queries", type=str, help="query embeddings; omit for leave-one-out on the database")
    _add(p, "--query-labels", dest="query_labels", type=str)
    _add(p, "--ood-queries", dest="ood_queries", type=str)
    _add(p, "--ks", type=_int_list)
    _add(p, "--mode", choices=MODES)
    _add(p, "--bins", type=int)
    _add(p, "--ood-bins", dest="ood_bins", type=int)
    return parser


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if isinstance(data, dict) and "config" in data and "command" in data:
        data = dict(data["config"], seed=data.get("seed"))
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(data) - _ALL_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return data


def resolve_config(command: str, args: argparse.Namespace) -> tuple[dict, int]:
    """Merge defaults, config file and explicit flags; returns ``(config, seed)``."""
    defaults = DEFAULTS[command]
    from_file = _load_config_file(args.config)
    flags = {k: v for k, v in vars(args).items() if k in defaults or k == "seed"}
    config = dict(defaults)
    config.update({k: v for k, v in from_file.items() if k in defaults})
    config.update({k: v for k, v in flags.items() if k in defaults})
    if "seed" in flags:
        seed = flags["seed"]
    elif from_file.get("seed") is not None:
        seed = from_file["seed"]
    else:
        env = os.environ.get("BTL_SEED")
        try:
            seed = int(env) if env not in (None, "") else 0
        except ValueError as exc:
            raise UsageError(f"BTL_SEED must be an integer, got {env!r}") from exc
    return config, int(seed)


# -- helpers ------------------------------------------------------------------------


def _write(out_dir: Path, name: str, text: str, written: list[str]):
    path = out_dir / name
    path.write_text(text)
    written.append(str(path))


def _dataset(config: dict, seed: int):
    try:
        return generate_synthetic_dataset(
            n_classes=config["n_classes"],
            per_class=config["per_class"],
            input_dim=config["input_dim"],
            noise_profile=(config["noise_low"], config["noise_high"]),
            seed=seed,
            train_fraction=config["train_fraction"],
            noise_model=config["noise_model"],
        )
    except ValueError as exc:
        raise UsageError(f"invalid dataset settings: {exc}") from exc


def _json_dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _load_embeddings(path: str, labels_path: str | None):
    """Returns ``(ids, means, variances, labels, noise_or_None)``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read embeddings {path}: {exc}") from exc
    try:
        if path.endswith(".json"):
            payload = json.loads(text)
            ids = [str(i) for i in payload["ids"]]
            embs = [GaussianEmbedding.from_dict(e) if e["variance"] > 0 else GaussianEmbedding(e["mean"], 0.0, exact=True) for e in payload["embeddings"]]
            labels = np.asarray(payload["labels"])
            noise = np.asarray(payload["noise"], dtype=np.float64) if payload.get("noise") is not None else None
        else:
            ids, embs = embeddings_from_csv(text)
            if labels_path is None:
                raise UsageError(f"{path} is CSV; pass its labels file")
            label_rows = Path(labels_path).read_text().splitlines()
            header = label_rows[0].split(",")
            if header[:2] != ["id", "label"]:
                raise UsageError("labels CSV must start with header 'id,label'")
            rows = [r.split(",") for r in label_rows[1:] if r]
            if [r[0] for r in rows] != ids:
                raise UsageError(f"ids in {labels_path} do not match {path}")
            labels = np.array([int(r[1]) for r in rows])
            noise = np.array([float(r[2]) for r in rows]) if "noise" in header else None
    except (KeyError, ValueError, IndexError, OSError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"malformed embeddings {path}: {exc}") from exc
    if not embs:
        raise UsageError(f"{path} holds no embeddings")
    dims = {e.dim for e in embs}
    if len(dims) != 1:
        raise UsageError(f"{path} mixes embedding dimensions")
    means = np.stack([e.mean for e in embs])
    variances = np.array([e.variance for e in embs])
    return ids, means, variances, labels, noise


# -- commands --------------------------------------------------------------------------


def cmd_simulate_approx(config, seed, out_dir, written):
    if config["trials"] < 1 or config["samples"] < 2 or min(config["dims"]) < 1:
        raise UsageError("need trials >= 1, samples >= 2 and positive dimensions")
    report = run_approximation_study(config["dims"], config["trials"], config["samples"], seed)
    _write(out_dir, "approx.csv", report.to_csv(), written)
    _write(out_dir, "approx.json", report.to_json() + "\n", written)
    for dim, ks in report.median_ks_by_dim().items():
        print(f"D={dim:5d}  median KS={ks:.5f}")
    return EXIT_OK


def cmd_gradcheck(config, seed, out_dir, written):
    if config["trials"] < 1 or min(config["dims"]) < 1:
        raise UsageError("need trials >= 1 and positive dimensions")
    report = run_gradcheck(config["trials"], config["dims"], seed, fault=config["inject_fault"])
    _write(out_dir, "gradcheck.json", _json_dump(report.to_dict()), written)
    for name, comp in report.components.items():
        status = "ok" if not comp.failures else "FAIL"
        print(f"{name:9s} max rel error {comp.max_rel_error:.3e} (threshold {comp.threshold:g}) {status}")
    if not report.ok:
        for name, comp in report.components.items():
            for case in comp.failures:
                print(f"offending {name} case: {json.dumps(case)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_train(config, seed, out_dir, written):
    train_keys = {k: config[k] for k in _TRAIN_DEFAULTS}
    try:
        tc = TrainConfig.from_dict({**train_keys, "seed": seed})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    dataset = _dataset(config, seed)
    try:
        params, history = train(tc, dataset)
        status = EXIT_OK
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}; writing last finite state", file=sys.stderr)
        params, history, status = exc.params, exc.history, EXIT_FAIL
    _write(out_dir, "checkpoint.json", params.to_json() + "\n", written)
    _write(out_dir, "history.csv", history.to_csv(), written)
    if history.rows:
        last = history.rows[-1]
        print(f"epoch {last['epoch']}: loss {last['loss']:.4f} val R@1 {last['val_r1']:.4f}")
    return status


def cmd_embed(config, seed, out_dir, written):
    if config["checkpoint"] is None:
        raise UsageError("--checkpoint is required")
    try:
        params = EncoderParams.from_json(Path(config["checkpoint"]).read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from exc
    dataset = _dataset(config, seed)
    if params.input_dim != dataset.input_dim:
        raise UsageError(f"checkpoint expects input dimension {params.input_dim}, dataset has {dataset.input_dim}")

    if config["split"] == "ood":
        if config["ood_count"] < 1:
            raise UsageError("--ood-count must be >= 1")
        inputs, noise = generate_ood_inputs(
            config["ood_count"],
            dataset.input_dim,
            centre_scale=config["ood_scale"],
            noise_profile=(config["noise_low"], config["noise_high"]),
            seed=seed,
            noise_model=config["noise_model"],
        )
        ids = [f"ood{i}" for i in range(len(inputs))]
        labels = -np.arange(1, len(inputs) + 1)
    else:
        idx = dataset.split_indices(config["split"])
        inputs, noise = dataset.inputs[idx], dataset.noise[idx]
        ids = [str(i) for i in idx]
        labels = dataset.labels[idx]
    means, variances = embed_arrays(params, inputs)
    embs = [GaussianEmbedding(m, v, exact=True) for m, v in zip(means, variances)]

    if config["format"] == "json":
        payload = {
            "ids": ids,
            "labels": [int(v) for v in labels],
            "noise": [float(v) for v in noise],
            "embeddings": [e.to_dict() for e in embs],
        }
        _write(out_dir, "embeddings.json", _json_dump(payload), written)
    else:
        _write(out_dir, "embeddings.csv", embeddings_to_csv(ids, embs), written)
        rows = ["id,label,noise"] + [f"{i},{int(l)},{float(n)!r}" for i, l, n in zip(ids, labels, noise)]
        _write(out_dir, "labels.csv", "\n".join(rows) + "\n", written)
    print(f"embedded {len(ids)} items from split '{config['split']}'")
    return EXIT_OK


def cmd_eval(config, seed, out_dir, written):
    if config["db"] is None:
        raise UsageError("--db is required")
    ks = sorted(set(config["ks"]))
    if ks[0] < 1 or config["bins"] < 1:
        raise UsageError("k values and --bins must be >= 1")
    _, db_m, db_v, db_l, db_noise = _load_embeddings(config["db"], config["db_labels"])
    leave_one_out = config["queries"] is None
    if leave_one_out:
        q_m, q_v, q_l, q_noise = db_m, db_v, db_l, db_noise
    else:
        _, q_m, q_v, q_l, q_noise = _load_embeddings(config["queries"], config["query_labels"])
    if q_m.shape[1] != db_m.shape[1]:
        raise UsageError(f"query dimension {q_m.shape[1]} != database dimension {db_m.shape[1]}")

    results = retrieve_arrays(db_m, db_v, db_l, q_m, q_v, q_l, max(ks), config["mode"], exclude_self=leave_one_out)
    has_variance = np.ptp(q_v) > 0
    metrics = {
        "n_queries": len(results),
        "n_database": int(db_m.shape[0]),
        "mode": config["mode"],
        "leave_one_out": leave_one_out,
        "notes": results.notes,
    }
    for k in ks:
        kk = min(k, results.k)
        metrics[f"R@{k}"] = recall_at_k(results, kk)
        metrics[f"M@{k}"] = map_at_k(results, kk)
        if has_variance and len(results) >= config["bins"]:
            report = calibration_bins(results, config["bins"], kk)
            metrics[f"ECE@{k}"] = ece_at_k(report)
            _write(out_dir, f"calibration_at_{k}.csv", report.to_csv(), written)
        else:
            metrics[f"ECE@{k}"] = None
    if not has_variance:
        metrics["notes"] = metrics["notes"] + ["queries carry no variance estimates; ECE undefined"]
    if q_noise is not None and has_variance:
        metrics["spearman_noise_variance"] = float(spearmanr(q_noise, q_v).statistic)

    if config["ood_queries"] is not None:
        ood_path = config["ood_queries"]
        _, o_m, o_v, o_l, _ = _load_embeddings(ood_path, None if ood_path.endswith(".json") else _sibling_labels(ood_path))
        if o_m.shape[1] != db_m.shape[1]:
            raise UsageError(f"OOD query dimension {o_m.shape[1]} != database dimension {db_m.shape[1]}")
        ood_results = retrieve_arrays(db_m, db_v, db_l, o_m, o_v, o_l, 1, config["mode"])
        sep = ood_separation(results, ood_results, bins=config["ood_bins"])
        metrics["ood_auroc"] = sep.auroc
        _write(out_dir, "ood.json", _json_dump(sep.to_dict()), written)

    _write(out_dir, "metrics.json", _json_dump(metrics), written)
    for k in ks:
        ece = metrics[f"ECE@{k}"]
        ece_text = "n/a" if ece is None else f"{ece:.4f}"
        print(f"k={k:3d}  R@k={metrics[f'R@{k}']:.4f}  M@k={metrics[f'M@{k}']:.4f}  ECE@k={ece_text}")
    if "ood_auroc" in metrics:
        print(f"OOD AUROC={metrics['ood_auroc']:.4f}")
    return EXIT_OK


def _sibling_labels(path: str) -> str | None:
    """``labels.csv`` next to an ``embeddings.csv`` written by ``embed``."""
    candidate = Path(path).with_name("labels.csv")
    return str(candidate) if candidate.exists() else None


COMMANDS = {
    "simulate-approx": cmd_simulate_approx,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "embed": cmd_embed,
    "eval": cmd_eval,
}


def _thread_limit(threads: int | None):
    if threads is None:
        return nullcontext()
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    start = time.perf_counter()
    written: list[str] = []
    try:
        config, seed = resolve_config(args.command, args)
        args.out.mkdir(parents=True, exist_ok=True)
        with _thread_limit(args.threads):
            code = COMMANDS[args.command](config, seed, args.out, written)
    except UsageError as exc:
        print(f"btl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest = {
        "command": args.command,
        "config": config,
        "seed": seed,
        "threads": args.threads,
        "version": __version__,
        "outputs": written,
        "exit_code": code,
        "wall_clock_seconds": time.perf_counter() - start,
    }
    (args.out / "manifest.json").write_text(_json_dump(manifest))
    return code


if __name__ == "__main__":
    sys.exit(main())
