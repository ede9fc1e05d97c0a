"""Training loop: manifest, per-epoch metrics CSV, checkpoints."""

from __future__ import annotations

import csv
import datetime
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import __version__
from .config import TrainConfig, to_flat
from .data import SPECS, batch_iter, load_split, resolve_data_dir
from .errors import MecapsError
from .model import Adam, MECapsNet, evaluate, save_checkpoint
from .rng import Rng, STREAM_INIT, STREAM_S3P
from .tensor import backward
from .capsules import predict

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc",
                  "recon_loss", "lr", "wall_seconds")


class TrainingAbort(MecapsError):
    """Raised when the loss turns non-finite; names the offending step."""


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    recon_loss: float
    lr: float
    wall_seconds: float

    def values(self):
        return (self.epoch, repr(self.train_loss), repr(self.train_acc),
                repr(self.val_loss), repr(self.val_acc), repr(self.recon_loss),
                repr(self.lr), repr(self.wall_seconds))


def write_manifest(out_dir: Path, config: TrainConfig, model: MECapsNet) -> None:
    manifest = {
        "config": to_flat(config),
        "dataset": config.dataset,
        "build": f"mecaps-{__version__}",
        "start_time": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "output_dir": str(out_dir),
        "parameter_count": model.param_count(),
        "recon_weight_resolved": model.recon_weight,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def run_training(config: TrainConfig, out_dir,
                 data: Optional[Tuple] = None,
                 data_dir: Optional[str] = None) -> List[EpochRow]:
    """Train per `config`, writing manifest.json, metrics.csv, and the
    best/last checkpoints into `out_dir`. `data` may inject
    ((train_x, train_y), (test_x, test_y)) directly (tests); otherwise
    the dataset is loaded from `data_dir`.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if data is None:
        root = resolve_data_dir(data_dir)
        train_x, train_y = load_split(config.dataset, root, "train")
        test_x, test_y = load_split(config.dataset, root, "test")
    else:
        (train_x, train_y), (test_x, test_y) = data
    if config.limit is not None:
        train_x, train_y = train_x[:config.limit], train_y[:config.limit]
    if config.test_limit is not None:
        test_x, test_y = test_x[:config.test_limit], test_y[:config.test_limit]

    spec = SPECS[config.dataset]
    model = MECapsNet(config, spec.image_shape, classes=spec.classes,
                      rng=Rng(config.seed, STREAM_INIT))
    log.info("model parameters: %d", model.param_count())
    write_manifest(out_dir, config, model)

    opt = Adam(model.parameters(), beta1=config.beta1, beta2=config.beta2,
               eps=config.adam_eps)
    rows: List[EpochRow] = []
    best_val = -1.0
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as f:
        csv.writer(f).writerow(METRIC_COLUMNS)

    for epoch in range(config.epochs):
        t0 = time.monotonic()
        lr = config.lr * config.lr_decay ** epoch
        s3p_rng = Rng(config.seed, STREAM_S3P + epoch)
        loss_sum = rec_sum = 0.0
        correct = 0
        seen = 0
        for step, batch in enumerate(batch_iter(train_x, train_y, config.batch_size,
                                                config.seed, epoch)):
            out = model.forward(batch.images, train=True, rng=s3p_rng,
                                labels=batch.labels)
            total, _, rec = model.loss(out, batch.images, batch.labels)
            if not np.isfinite(total.data):
                raise TrainingAbort(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(loss={total.data}, recon={rec.data})")
            backward(total)
            opt.step(lr)
            opt.zero_grad()
            n = len(batch.labels)
            loss_sum += total.item() * n
            rec_sum += rec.item() * n
            correct += int((predict(out.class_field) == batch.labels).sum())
            seen += n
        val = evaluate(model, test_x, test_y, batch_size=config.batch_size)
        row = EpochRow(epoch=epoch, train_loss=loss_sum / seen,
                       train_acc=correct / seen, val_loss=val.loss,
                       val_acc=val.accuracy, recon_loss=rec_sum / seen, lr=lr,
                       wall_seconds=time.monotonic() - t0)
        rows.append(row)
        with open(csv_path, "a", newline="") as f:
            csv.writer(f).writerow(row.values())
        log.info("epoch %d: train_loss=%.4f train_acc=%.4f val_acc=%.4f (%.1fs)",
                 epoch, row.train_loss, row.train_acc, row.val_acc, row.wall_seconds)
        if val.accuracy > best_val:
            best_val = val.accuracy
            save_checkpoint(out_dir / "checkpoint.bin", model, epoch)
        save_checkpoint(out_dir / "checkpoint_last.bin", model, epoch)
    return rows
