"""Command-line harness: train, eval, gradcheck, inspect.

Exit codes are a stable contract:

  0  success
  2  configuration could not be parsed or is inconsistent
  3  dataset error
  4  numeric failure (e.g. whitening factorization)
  5  gradient check exceeded its threshold
  6  checkpoint does not match the model (or is missing for eval)
  7  corrupt checkpoint or tensor file

The per-epoch metrics CSV contains only deterministic columns; wall-clock
times go to a separate timing CSV so identical seeds produce
byte-identical metrics.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import (
    load_checkpoint,
    magnitude_histogram,
    parameter_accounting,
    save_checkpoint,
)
from .config import RunConfig, build_network, load_run_config
from .errors import (
    CheckpointCorruptError,
    CheckpointMismatchError,
    ConfigError,
    DatasetError,
    NumericError,
    QuatnetError,
)
from .network import stack_batch
from .qdata import load_dataset
from .qinit import RNG_ALGORITHM
from .qtrain import (
    EpochRow,
    evaluate,
    gradient_check,
    train_network,
    worker_threads,
)

METRICS_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc\n"
TIMING_HEADER = "epoch,wall_ms\n"


def _fmt(value: float) -> str:
    return format(value, ".10g")


def _write_run_metadata(out_dir: Path, run: RunConfig) -> None:
    meta = {
        "quatnet_version": __version__,
        "seed": run.seed,
        "precision": run.precision,
        "rng": RNG_ALGORITHM,
        "numpy": np.__version__,
        "worker_threads": worker_threads(),
        "config": run.raw,
    }
    (out_dir / "run.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_split(run: RunConfig, split: str):
    manifest = run.train_manifest if split == "train" else run.val_manifest
    if manifest is None:
        raise DatasetError(f"config does not declare a {split} dataset")
    return load_dataset(manifest, run.n_classes)


def cmd_train(args: argparse.Namespace) -> int:
    run = _run_config(args)
    out_dir = Path(args.out) if args.out else run.out_dir
    if out_dir is None:
        raise ConfigError("no output directory (set 'out' or pass --out)")
    out_dir.mkdir(parents=True, exist_ok=True)
    network = build_network(run)
    train_set = _load_split(run, "train")
    val_set = None
    if run.val_manifest is not None:
        val_set = _load_split(run, "val")
    _write_run_metadata(out_dir, run)

    metrics_path = out_dir / "metrics.csv"
    timing_path = out_dir / "timing.csv"
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as mfh, \
            open(timing_path, "w", encoding="utf-8", newline="\n") as tfh:
        mfh.write(METRICS_HEADER)
        tfh.write(TIMING_HEADER)

        def sink(row: EpochRow) -> None:
            mfh.write(f"{row.epoch},{_fmt(row.train_loss)},"
                      f"{_fmt(row.train_acc)},{_fmt(row.val_loss)},"
                      f"{_fmt(row.val_acc)}\n")
            tfh.write(f"{row.epoch},{_fmt(row.wall_ms)}\n")

        train_network(network, train_set.samples,
                      val_set.samples if val_set else None,
                      run.train, on_epoch=sink)
    save_checkpoint(network, out_dir / "checkpoint")
    print(f"training finished; metrics in {metrics_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run = _run_config(args)
    network = build_network(run)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CheckpointMismatchError(f"checkpoint not found: {ckpt}")
    load_checkpoint(network, ckpt)
    dataset = _load_split(run, args.split)
    planes = stack_batch([s for s, _ in dataset.samples],
                         dtype=run.train.dtype)
    labels = np.array([lab for _, lab in dataset.samples], dtype=np.int64)
    loss, acc = evaluate(network, planes, labels, run.train.loss,
                         run.train.batch_size)
    print(f"split={args.split} loss={_fmt(loss)} accuracy={_fmt(acc)}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    run = _run_config(args)
    # double precision is forced for finite differences
    network = build_network(run, dtype=np.float64)
    rng = np.random.Generator(np.random.PCG64(run.seed))
    batch = run.gradcheck_batch
    if run.train_manifest is not None:
        dataset = _load_split(run, "train")
        picks = rng.choice(len(dataset.samples),
                           size=min(batch, len(dataset.samples)),
                           replace=False)
        samples = [dataset.samples[i] for i in picks]
        x = stack_batch([s for s, _ in samples], dtype=np.float64)
        labels = np.array([lab for _, lab in samples], dtype=np.int64)
        classes = dataset.n_classes
    else:
        x = rng.standard_normal((4, batch) + run.input_shape)
        classes = int(np.prod(network.output_shape))
        labels = rng.integers(0, classes, size=batch)
    if run.train.loss == "mse_real":
        target_planes = rng.standard_normal(
            (4, batch) + network.output_shape)
        from .qtensor import QTensor
        target = QTensor(target_planes)
        report = gradient_check(network, x, target, loss="mse_real",
                                threshold=run.gradcheck_threshold)
    else:
        report = gradient_check(network, x, labels,
                                loss="crossentropy_magnitude",
                                threshold=run.gradcheck_threshold)
    lines = report.lines()
    out_dir = Path(args.out) if args.out else run.out_dir
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "gradcheck_report.txt").write_text(
            "\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0 if report.passed else 5


def cmd_inspect(args: argparse.Namespace) -> int:
    rows = parameter_accounting(args.checkpoint)
    total_quat = sum(r["quat_params"] for r in rows)
    hist_lines = ["layer,bin_lo,bin_hi,count\n"]
    print(f"{'layer':40s} {'quat':>8s} {'real(x4)':>9s} {'stored':>8s}")
    for row in rows:
        print(f"{row['layer']:40s} {row['quat_params']:8d} "
              f"{row['real_expanded']:9d} {row['stored_reals']:8d}")
        for lo, hi, count in magnitude_histogram(row["magnitudes"]):
            hist_lines.append(
                f"{row['layer']},{_fmt(lo)},{_fmt(hi)},{count}\n")
    print(f"total quaternion parameters: {total_quat} "
          f"(= {4 * total_quat} expanded reals, a 4x saving)")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "weight_histograms.csv").write_text(
            "".join(hist_lines), encoding="utf-8")
    return 0


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "precision", None) is not None:
        overrides["precision"] = args.precision
    if getattr(args, "out", None) is not None:
        overrides["out"] = args.out
    return load_run_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quatnet",
        description="Quaternion convolutional network training harness")
    parser.add_argument("--version", action="version",
                        version=f"quatnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--precision", choices=("f32", "f64"), default=None,
                       help="override the config precision")
        p.add_argument("--out", default=None, help="output directory")

    p_train = sub.add_parser("train", help="train a model")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("train", "val"),
                        default="train")
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck",
                            help="verify gradients by finite differences")
    common(p_grad)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_inspect = sub.add_parser("inspect",
                               help="summarize a checkpoint's parameters")
    p_inspect.add_argument("--checkpoint", required=True)
    p_inspect.add_argument("--out", default=None)
    p_inspect.set_defaults(func=cmd_inspect)
    return parser


EXIT_CODES = (
    (ConfigError, 2),
    (DatasetError, 3),
    (NumericError, 4),
    (CheckpointMismatchError, 6),
    (CheckpointCorruptError, 7),
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except QuatnetError as exc:
        for etype, code in EXIT_CODES:
            if isinstance(exc, etype):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
