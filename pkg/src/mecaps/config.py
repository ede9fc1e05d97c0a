"""Training configuration and its flat dotted-key JSON form.

Config files and manifests store one flat JSON object whose keys are
dotted paths ("optim.lr", "caps.dim", ...) so manifests diff cleanly;
flags override file values.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError
from .seblock import EXCITATIONS, SQUEEZE_MODES

DATASET_IDS = ("mnist", "fashion_mnist", "kmnist", "cifar10")


@dataclass
class TrainConfig:
    dataset: str = "mnist"
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    precision: int = 32              # 64 for bit-reproducibility checks
    limit: Optional[int] = None      # cap on train samples
    test_limit: Optional[int] = None

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 0.9            # multiplies lr once per epoch

    capsule_dim: int = 8
    num_capsules: int = 8            # capsule types per spatial location
    routing_iters: int = 3
    squash_c: float = 0.5
    lambda0: float = 1.0
    var_floor: float = 1e-4

    squeeze: str = "s3p"
    excitation: str = "sigmoid"
    reduction: int = 16
    s3p_grid: int = 4
    s3p_stride: int = 2

    stem_width: int = 32             # block widths are w, 2w, 4w

    decoder_hidden: int = 512
    decoder_input: str = "pose"      # "pose" or "probs"

    loss: str = "margin"             # "margin" or "spread"
    margin_down_weight: float = 0.5
    spread_margin: float = 0.2
    recon_weight: Optional[float] = None  # None -> 0.0005 * out_pixels

    def validate(self) -> "TrainConfig":
        if self.dataset not in DATASET_IDS:
            raise ConfigError(f"unknown dataset {self.dataset!r} (choose from {DATASET_IDS})")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        for name in ("batch_size", "capsule_dim", "num_capsules", "routing_iters",
                     "stem_width", "decoder_hidden", "reduction", "s3p_grid", "s3p_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr", "lr_decay", "squash_c", "margin_down_weight", "lambda0",
                     "var_floor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.squeeze not in SQUEEZE_MODES:
            raise ConfigError(f"unknown squeeze mode {self.squeeze!r}")
        if self.excitation not in EXCITATIONS:
            raise ConfigError(f"unknown excitation {self.excitation!r}")
        if self.decoder_input not in ("pose", "probs"):
            raise ConfigError("decoder_input must be 'pose' or 'probs'")
        if self.loss not in ("margin", "spread"):
            raise ConfigError("loss must be 'margin' or 'spread'")
        if self.s3p_grid % self.s3p_stride != 0:
            raise ConfigError("s3p_grid must be a multiple of s3p_stride")
        return self


_KEYS = {
    "dataset": "data.dataset",
    "limit": "data.limit",
    "test_limit": "data.test_limit",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "seed": "train.seed",
    "precision": "train.precision",
    "lr": "optim.lr",
    "beta1": "optim.beta1",
    "beta2": "optim.beta2",
    "adam_eps": "optim.eps",
    "lr_decay": "optim.lr_decay",
    "capsule_dim": "caps.dim",
    "num_capsules": "caps.count",
    "routing_iters": "caps.routing_iters",
    "squash_c": "caps.squash_c",
    "lambda0": "caps.lambda0",
    "var_floor": "caps.var_floor",
    "squeeze": "se.squeeze",
    "excitation": "se.excitation",
    "reduction": "se.reduction",
    "s3p_grid": "se.s3p_grid",
    "s3p_stride": "se.s3p_stride",
    "stem_width": "model.stem_width",
    "decoder_hidden": "decoder.hidden",
    "decoder_input": "decoder.input",
    "loss": "loss.kind",
    "margin_down_weight": "loss.down_weight",
    "spread_margin": "loss.spread_margin",
    "recon_weight": "loss.recon_weight",
}
_FIELDS = {v: k for k, v in _KEYS.items()}


def to_flat(cfg: TrainConfig) -> dict:
    return {_KEYS[f.name]: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def from_flat(flat: dict, base: Optional[TrainConfig] = None) -> TrainConfig:
    cfg = dataclasses.replace(base) if base else TrainConfig()
    for key, value in flat.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, _FIELDS[key], value)
    return cfg.validate()


def load_config_file(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        flat = json.load(f)
    if not isinstance(flat, dict):
        raise ConfigError(f"config file {path} is not a JSON object")
    return from_flat(flat, base)


def dump_config(cfg: TrainConfig) -> str:
    return json.dumps(to_flat(cfg), indent=2, sort_keys=True)
