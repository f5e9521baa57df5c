"""Command-line entry point: ``siamese-snn {train,eval,encode,oracle}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or checkpoint
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import subprocess
import sys
import time
from pathlib import Path

import numba
import numpy as np

from . import __version__
from .data import DataFormatError, RawDataset, encode_dataset, load_mnist, stratified_indices
from .encoding import SCHEMES, EncodedDataset, EncoderConfig
from .evaluation import (
    STEADY_STATE_NOTE,
    TRUNCATION_NOTE,
    EvalConfig,
    classify,
    embed,
    latency_curve,
    sparsity_from_fired,
    write_f1_csv,
    write_latency_csv,
    write_qn_csv,
    write_summary,
)
from .oracles import SUITES, run_suite
from .snn import CheckpointError, Network
from .training import NumericalError, TrainingConfig, save_config, train

log = logging.getLogger("siamese_snn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REPORTS = ("f1", "qn", "latency")
DATASETS = ("mnist", "toy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# datasets


def toy_dataset(n_per_class: int = 32, seed: int = 0, jitter: float = 0.1) -> EncodedDataset:
    """Two separable single-channel classes: one event near t=0 or near t=2 ms."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n_per_class)
    times = (2.0 * labels + rng.uniform(0, jitter, labels.size))[:, None]
    return EncodedDataset(times, np.ones_like(times, dtype=bool), labels, "toy")


def split_indices(labels: np.ndarray, subset: int | None, val_size: int):
    """Stratified training indices plus disjoint validation indices from the same split."""
    classes = np.unique(labels)
    if subset is None:
        per_class_val = val_size // classes.size
        train_idx, val_idx = [], []
        for c in classes:
            idx = np.flatnonzero(labels == c)
            cut = idx.size - per_class_val
            train_idx.append(idx[:cut])
            val_idx.append(idx[cut:])
        return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))
    train_idx = stratified_indices(labels, subset)
    per_class = -(-subset // classes.size)
    val_idx = stratified_indices(labels, val_size, skip=per_class) if val_size else np.zeros(0, dtype=np.int64)
    return train_idx, val_idx


@dataclasses.dataclass
class DataSpec:
    dataset: str = "mnist"
    scheme: str = "black_white"
    subset: int | None = None
    val_size: int = 1000
    test_subset: int | None = None
    data_dir: str | None = None
    cache_dir: str | None = None
    toy_per_class: int = 32


def load_train_data(spec: DataSpec, seed: int):
    """Return ``(train, val, info)`` where ``info`` carries dataset hashes for the manifest."""
    if spec.dataset == "toy":
        ds = toy_dataset(spec.toy_per_class, seed)
        return ds, None, {"dataset": "toy", "n_train": len(ds)}
    raw = load_mnist("train", spec.data_dir)
    tr_idx, val_idx = split_indices(raw.labels, spec.subset, spec.val_size)
    enc = EncoderConfig(spec.scheme)
    tr_raw = raw.subset(tr_idx)
    train_ds = encode_dataset(tr_raw, enc, spec.cache_dir)
    val_ds = None
    info = {"dataset": "mnist", "n_train": len(tr_raw), "train_sha256": tr_raw.digest(), "encoder": dataclasses.asdict(enc)}
    if val_idx.size:
        val_raw = raw.subset(val_idx)
        val_ds = encode_dataset(val_raw, enc, spec.cache_dir)
        info.update(n_val=len(val_raw), val_sha256=val_raw.digest())
    return train_ds, val_ds, info


def load_test_data(spec: DataSpec, seed: int):
    if spec.dataset == "toy":
        return toy_dataset(spec.toy_per_class, seed + 1)
    raw = load_mnist("test", spec.data_dir)
    idx = stratified_indices(raw.labels, spec.test_subset) if spec.test_subset else np.arange(len(raw))
    return encode_dataset(raw.subset(idx), EncoderConfig(spec.scheme), spec.cache_dir)


# ---------------------------------------------------------------------------
# helpers


def _git_id() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def _set_jobs(jobs: int) -> int:
    jobs = max(1, min(jobs, numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(jobs)
    return jobs


_CONFIG_FLAGS = {
    "alpha": float,
    "K": float,
    "l2": float,
    "learning_rate": float,
    "batch_size": int,
    "classes_per_batch": int,
    "rms_decay": float,
    "rms_eps": float,
    "max_epochs": int,
    "at_threshold": float,
    "patience": int,
    "tau_syn": float,
    "v_thr": float,
    "init_min_firing": float,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for name, typ in _CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("--sizes", type=lambda s: tuple(int(x) for x in s.split(",")), default=None,
                   help="comma-separated layer sizes, e.g. 784,400,400,10")
    p.add_argument("--log-wall-time", dest="log_wall_time", action="store_true", default=None)


def _build_config(args) -> TrainingConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    try:
        cfg = TrainingConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config file {args.config}: {exc}") from exc
    for name in list(_CONFIG_FLAGS) + ["sizes", "log_wall_time"]:
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.sizes = tuple(cfg.sizes)
    return cfg


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=DATASETS, default=None)
    p.add_argument("--scheme", default=None, help=f"one of: {', '.join(SCHEMES)}")
    p.add_argument("--subset", type=int, default=None, help="stratified training subset size")
    p.add_argument("--val-size", type=int, default=None)
    p.add_argument("--test-subset", type=int, default=None, help="stratified test subset size")
    p.add_argument("--data-dir", default=None, help="directory with MNIST IDX files (env SIAMESE_SNN_DATA)")
    p.add_argument("--cache-dir", default=None, help="encoded-dataset cache directory")


def _data_spec(args, base: DataSpec | None = None) -> DataSpec:
    spec = dataclasses.replace(base) if base is not None else DataSpec()
    for name in ("dataset", "scheme", "subset", "val_size", "test_subset", "data_dir", "cache_dir"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(spec, name, value)
    if spec.scheme not in SCHEMES:
        raise UsageError(f"invalid scheme {spec.scheme!r}; valid schemes: {', '.join(SCHEMES)}")
    return spec


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        cfg = TrainingConfig.from_dict(manifest["config"])
        spec = DataSpec(**manifest["data"])
        jobs = manifest.get("jobs", 1)
        out_dir = Path(args.out_dir or manifest["outputs"]["out_dir"])
    else:
        cfg = _build_config(args)
        spec = _data_spec(args)
        jobs = args.jobs
        if args.out_dir is None:
            raise UsageError("--out-dir is required")
        out_dir = Path(args.out_dir)
    if spec.dataset == "toy" and args.sizes is None and not args.from_manifest and not args.config:
        cfg.sizes = (1, 4, 3)
    errors = cfg.validate()
    if spec.dataset == "mnist" and cfg.sizes[0] != 784:
        errors.append(f"sizes[0] must be 784 for MNIST, got {cfg.sizes[0]}")
    if errors:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(errors))
    jobs = _set_jobs(jobs)

    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "out_dir": str(out_dir),
        "checkpoint": str(out_dir / "checkpoint.npz"),
        "log": str(out_dir / "train_log.csv"),
        "manifest": str(out_dir / "manifest.json"),
        "config": str(out_dir / "config.json"),
    }
    t0 = time.perf_counter()
    train_ds, val_ds, info = load_train_data(spec, cfg.seed)
    manifest = {
        "tool": "siamese-snn",
        "version": __version__,
        "build": _git_id(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "seed": cfg.seed,
        "jobs": jobs,
        "config": cfg.to_dict(),
        "data": dataclasses.asdict(spec),
        "datasets": info,
        "outputs": paths,
        "timings": {"load_s": time.perf_counter() - t0},
    }
    Path(paths["manifest"]).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    save_config(cfg, paths["config"])

    t1 = time.perf_counter()
    result = train(train_ds, cfg, val=val_ds, log_path=paths["log"])
    result.network.save(paths["checkpoint"])
    manifest["timings"]["train_s"] = time.perf_counter() - t1
    manifest["result"] = {
        "epochs_run": result.epochs_run,
        "stopped_early": result.stopped_early,
        "best_epoch": result.best_epoch,
        "epoch_at": result.epoch_at,
        "val_at": result.val_at,
    }
    Path(paths["manifest"]).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"trained {result.epochs_run} epochs; checkpoint {paths['checkpoint']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    network = Network.load(ckpt)
    manifest_path = Path(args.manifest) if args.manifest else ckpt.parent / "manifest.json"
    base = None
    if manifest_path.exists():
        base = DataSpec(**json.loads(manifest_path.read_text())["data"])
    spec = _data_spec(args, base)
    _set_jobs(args.jobs)
    seed = args.seed if args.seed is not None else 0
    expected = 1 if spec.dataset == "toy" else 784
    if network.topology.n_inputs != expected:
        raise CheckpointError(
            f"checkpoint expects {network.topology.n_inputs} input channels but the "
            f"{spec.dataset} data has {expected}; incompatible checkpoint"
        )
    reports = REPORTS if args.report == "all" else (args.report,)
    out_dir = Path(args.out_dir or ckpt.parent / "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = EvalConfig(k=args.k)

    train_ds, _, _ = load_train_data(spec, seed)
    test_ds = load_test_data(spec, seed)
    query = embed(network, test_ds, cfg.batch_size, keep_hidden="qn" in reports)
    need_ref = "f1" in reports or "latency" in reports
    ref = embed(network, train_ds, cfg.batch_size) if need_ref else None

    summary = {"checkpoint": str(ckpt), "scheme": spec.scheme, "dataset": spec.dataset, "k": cfg.k,
               "n_test": len(test_ds), "empty_test_embeddings": int((query.counts == 0).sum())}
    if "f1" in reports:
        _, f1 = classify(network, train_ds, test_ds, cfg, ref=ref, query=query)
        write_f1_csv(out_dir / "f1.csv", f1)
        summary["f1"] = f1
    if "qn" in reports:
        sp = sparsity_from_fired(query.hidden_fired, test_ds.labels, cfg.hist_bins)
        write_qn_csv(out_dir / "qn.csv", sp)
        summary["sparsity"] = sp.to_dict()
    if "latency" in reports:
        curve = latency_curve(network, test_ds, ref, cfg, query=query)
        write_latency_csv(out_dir / "latency.csv", curve)
        summary["latency"] = {
            "steady_state_ms": curve.steady_state_time,
            "final_accuracy": curve.final_accuracy,
            "excluded_examples": curve.excluded,
            "notes": [TRUNCATION_NOTE, STEADY_STATE_NOTE],
        }
    row = {}
    if "f1" in summary:
        row["F1-score"] = summary["f1"]["macro_f1"]
    if "sparsity" in summary:
        row["QN"] = summary["sparsity"]["mean_qn"]
    summary["table"] = {spec.scheme if spec.dataset == "mnist" else "toy": row}
    if args.report == "all":
        write_summary(out_dir / "summary.json", summary)
    for scheme, r in summary["table"].items():
        print(scheme, " ".join(f"{k}={v:.4f}" for k, v in r.items()))
    return EXIT_OK


def cmd_encode(args) -> int:
    spec = _data_spec(args)
    if spec.dataset != "mnist":
        raise UsageError("encode only applies to MNIST")
    cache = args.cache_dir or "cache"
    raw: RawDataset = load_mnist(args.split, spec.data_dir)
    n = spec.subset if args.split == "train" else spec.test_subset
    if n:
        raw = raw.subset(stratified_indices(raw.labels, n))
    ds = encode_dataset(raw, EncoderConfig(spec.scheme), cache)
    print(f"encoded {len(ds)} {args.split} images with {spec.scheme}; {ds.present.sum()} events")
    return EXIT_OK


def cmd_oracle(args) -> int:
    rep = run_suite(args.suite, seed=args.seed or 0)
    for c in rep.cases:
        print(f"{'PASS' if c.passed else 'FAIL'} {rep.suite}/{c.name} error={c.error:.3g} tol={c.tolerance:g} {c.detail}")
    if args.json:
        Path(args.json).write_text(json.dumps(_jsonable(rep.to_dict()), indent=2) + "\n")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="siamese-snn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", help="JSON file with training config fields")
    p.add_argument("--from-manifest", help="re-run exactly the run described by a manifest")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    _add_data_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="training manifest (default: next to the checkpoint)")
    p.add_argument("--report", choices=REPORTS + ("all",), default="all")
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    _add_data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("encode", help="encode MNIST into the cache")
    p.add_argument("--split", choices=("train", "test"), default="train")
    _add_data_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("oracle", help="run an independent oracle suite")
    p.add_argument("suite", help=f"one of: {', '.join(SUITES)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write the machine-readable report here")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "oracle" and args.suite not in SUITES:
            raise UsageError(f"unknown oracle suite {args.suite!r}; valid suites: {', '.join(SUITES)}")
        return args.func(args)
    except UsageError as exc:
        print(f"siamese-snn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataFormatError, CheckpointError) as exc:
        print(f"siamese-snn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"siamese-snn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
