"""Command-line entry point: train, eval, sweep, gradcheck.

Exit codes: 0 success, 1 verification/metric failure, 2 usage or config
error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import (DATASET_IDS, TrainConfig, from_flat, load_config_file,
                     to_flat)
from .data import SPECS, load_split, resolve_data_dir
from .errors import CheckpointError, ConfigError, DataFormatError, MecapsError
from .gradcheck import run_suite, scopes
from .model import evaluate, model_from_checkpoint
from .reconstruction import write_image
from .seblock import EXCITATIONS, SQUEEZE_MODES
from .train import TrainingAbort, run_training

log = logging.getLogger("mecaps")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_DATA = 3

SWEEP_AXES = {
    "capsule_dim": ("capsule_dim", int),
    "num_capsules": ("num_capsules", int),
    "squeeze": ("squeeze", str),
    "excitation": ("excitation", str),
}


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flat dotted keys)")
    p.add_argument("--data-dir", help="dataset root (or $MECAPS_DATA_DIR)")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--dataset", choices=DATASET_IDS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--limit", type=int, help="cap on train samples")
    p.add_argument("--test-limit", type=int, help="cap on test samples")
    p.add_argument("--capsule-dim", type=int)
    p.add_argument("--num-capsules", type=int)
    p.add_argument("--routing-iters", type=int)
    p.add_argument("--squeeze", choices=SQUEEZE_MODES)
    p.add_argument("--excitation", choices=EXCITATIONS)
    p.add_argument("--stem-width", type=int)
    p.add_argument("--reduction", type=int)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--recon-weight", type=float)
    p.add_argument("--decoder-input", choices=("pose", "probs"))
    p.add_argument("--loss", choices=("margin", "spread"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any flat config key, e.g. --set optim.lr=0.002")


_FLAG_FIELDS = ("dataset", "epochs", "batch_size", "lr", "seed", "limit",
                "test_limit", "capsule_dim", "num_capsules", "routing_iters",
                "squeeze", "excitation", "stem_width", "reduction", "precision",
                "recon_weight", "decoder_input", "loss")


def _parse_set_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare strings (e.g. squeeze modes)


def build_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        cfg = load_config_file(args.config, cfg)
    for name in _FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            cfg = dataclasses.replace(cfg, **{name: value})
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, raw = item.partition("=")
        overrides[key.strip()] = _parse_set_value(raw.strip())
    if overrides:
        cfg = from_flat(overrides, cfg)
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = build_config(args)
    run_training(cfg, args.out, data_dir=args.data_dir)
    print(f"training complete; outputs in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, epoch = model_from_checkpoint(args.checkpoint)
    cfg = model.config
    root = resolve_data_dir(args.data_dir)
    images, labels = load_split(cfg.dataset, root, args.split)
    if args.limit:
        images, labels = images[:args.limit], labels[:args.limit]
    result = evaluate(model, images, labels, batch_size=cfg.batch_size)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "confusion.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["true\\pred"] + list(range(model.classes)))
        for i, row in enumerate(result.confusion):
            writer.writerow([i] + row.tolist())
    # reconstructions from the predicted class (no labels at eval)
    n_rec = min(args.recons, len(images))
    if n_rec:
        out = model.forward(images[:n_rec], train=False)
        for i in range(n_rec):
            write_image(out_dir / f"recon_{i:03d}.{'ppm' if model.image_shape[0] == 3 else 'pgm'}",
                        out.reconstruction.data[i])
    payload = result.as_dict()
    payload.update({"checkpoint": str(args.checkpoint), "epoch": epoch,
                    "split": args.split, "dataset": cfg.dataset})
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    field, cast = SWEEP_AXES[args.axis]
    values = [cast(v) for v in args.values.split(",") if v]
    if not values:
        raise ConfigError("sweep: no values given")
    base = build_config(args)
    # desk-scale defaults keep table-axis sweeps to minutes
    if args.limit is None and base.limit is None:
        base = dataclasses.replace(base, limit=5000)
    if args.epochs is None:
        base = dataclasses.replace(base, epochs=5)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        cfg = dataclasses.replace(base, **{field: value})
        cell_dir = out_dir / f"{args.axis}_{value}"
        try:
            history = run_training(cfg, cell_dir, data_dir=args.data_dir)
            acc = max(r.val_acc for r in history)
            rows.append({"value": value, "accuracy": acc,
                         "top1_error": 1.0 - acc, "status": "ok"})
        except MecapsError as exc:
            log.error("sweep cell %s=%s failed: %s", args.axis, value, exc)
            rows.append({"value": value, "accuracy": "", "top1_error": "",
                         "status": "failed"})
    ranked = sorted(rows, key=lambda r: (r["status"] != "ok",
                                         -(r["accuracy"] or 0.0)))
    sweep_csv = out_dir / "sweep.csv"
    with open(sweep_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["axis", "value", "accuracy", "top1_error", "status"])
        for r in ranked:
            writer.writerow([args.axis, r["value"], r["accuracy"],
                             r["top1_error"], r["status"]])
    print(f"sweep complete; ranked results in {sweep_csv}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    reports = run_suite(args.scope, corrupt=args.corrupt)
    if not reports:
        raise ConfigError(f"gradcheck: unknown scope {args.scope!r} "
                          f"(choose from all, {', '.join(scopes())})")
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} ops within tolerance")
    return EXIT_FAIL if failed else EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mecaps",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model, write metrics + checkpoints")
    _add_train_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--data-dir")
    p_eval.add_argument("--split", choices=("train", "test"), default="test")
    p_eval.add_argument("--out", default="eval")
    p_eval.add_argument("--limit", type=int)
    p_eval.add_argument("--recons", type=int, default=8,
                        help="number of sample reconstructions to write")
    p_eval.set_defaults(fn=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="train one run per axis value, rank results")
    p_sweep.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    _add_train_flags(p_sweep)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p_gc.add_argument("--scope", default="all")
    p_gc.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook
    p_gc.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
