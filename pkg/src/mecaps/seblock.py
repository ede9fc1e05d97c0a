"""Squeeze-Excitation blocks with three squeeze variants.

Squeeze reduces an [N,C,H,W] map to one scalar per channel: GAP (global
average), GMP (global max), or S3P (stochastic spatial sampling). The
excitation MLP turns those scalars into per-channel scales, which then
rescale the map, optionally with a residual add around the block.

S3P runs in three stages: (1) a stride-1 local max over 3x3 windows
sharpens local evidence, (2) in train mode a random subset of g/s rows
and g/s columns per g-sized band survives (one draw per call, shared by
the whole batch), in eval mode a deterministic max pool over g-windows
with stride s stands in, (3) the surviving map is averaged into the
per-channel scalar. The train-mode subsampling resamples every call, so
repeated passes over the same image see different spatial evidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import (Tensor, gather2d, leaky_relu, matmul, maxpool2d, relu,
                     sigmoid, tanh)

SQUEEZE_MODES = ("gap", "gmp", "s3p")
EXCITATIONS = ("sigmoid", "relu", "leaky_relu", "tanh")

_FINAL_ACT = {
    "sigmoid": sigmoid,
    "relu": relu,
    "leaky_relu": lambda t: leaky_relu(t, 0.01),
    "tanh": tanh,
}


@dataclass
class S3PConfig:
    grid: int = 4      # band size g in pixels
    stride: int = 2    # downsample factor s; g/s rows survive per band
    local_window: int = 3

    def __post_init__(self):
        if self.grid < 1 or self.stride < 1 or self.grid % self.stride != 0:
            raise ConfigError(
                f"s3p: grid {self.grid} must be a positive multiple of stride {self.stride}")


@dataclass
class SeBlockParams:
    w1: Tensor                  # [C, C/r]
    w2: Tensor                  # [C/r, C]
    reduction: int
    squeeze: str = "s3p"
    excitation: str = "sigmoid"

    @classmethod
    def create(cls, channels: int, reduction: int, rng: Rng, squeeze: str = "s3p",
               excitation: str = "sigmoid", dtype=np.float64) -> "SeBlockParams":
        if reduction < 1 or channels % reduction != 0:
            raise ConfigError(
                f"se: channels {channels} not divisible by reduction ratio {reduction}")
        if squeeze not in SQUEEZE_MODES:
            raise ConfigError(f"se: unknown squeeze mode {squeeze!r}")
        if excitation not in EXCITATIONS:
            raise ConfigError(f"se: unknown excitation {excitation!r}")
        hidden = channels // reduction
        w1 = Tensor(rng.normal((channels, hidden), std=1.0 / math.sqrt(channels), dtype=dtype),
                    requires_grad=True)
        w2 = Tensor(rng.normal((hidden, channels), std=1.0 / math.sqrt(hidden), dtype=dtype),
                    requires_grad=True)
        return cls(w1=w1, w2=w2, reduction=reduction, squeeze=squeeze, excitation=excitation)


def squeeze_gap(u: Tensor) -> Tensor:
    """Per-channel spatial average: [N,C,H,W] -> [N,C]."""
    n, c = u.shape[0], u.shape[1]
    return u.reshape(n, c, -1).mean(axis=2)


def squeeze_gmp(u: Tensor) -> Tensor:
    """Per-channel spatial max: [N,C,H,W] -> [N,C]."""
    n, c = u.shape[0], u.shape[1]
    return u.reshape(n, c, -1).amax(axis=2)


def _pad_to_multiple(x: Tensor, g: int) -> Tensor:
    """Replicate the last row/column until H and W divide g."""
    h, w = x.shape[2], x.shape[3]
    hp = math.ceil(h / g) * g
    wp = math.ceil(w / g) * g
    if hp == h and wp == w:
        return x
    rows = np.minimum(np.arange(hp), h - 1)
    cols = np.minimum(np.arange(wp), w - 1)
    return gather2d(x, rows, cols)


def _band_sample(extent: int, g: int, s: int, rng: Rng) -> np.ndarray:
    """g/s distinct indices per band of g, sorted ascending overall."""
    keep = g // s
    picks = []
    for band in range(extent // g):
        idx = rng.choice_without_replacement(g, keep) + band * g
        picks.append(np.sort(idx))
    return np.concatenate(picks)


def squeeze_s3p(u: Tensor, cfg: S3PConfig, rng: Rng = None, train: bool = True) -> Tensor:
    """Stochastic spatial sampling squeeze: [N,C,H,W] -> [N,C]."""
    if train and rng is None:
        raise ConfigError("s3p: train mode requires an rng")
    m = maxpool2d(u, cfg.local_window, stride=1, same=True)
    m = _pad_to_multiple(m, cfg.grid)
    hp, wp = m.shape[2], m.shape[3]
    if train:
        rows = _band_sample(hp, cfg.grid, cfg.stride, rng)
        cols = _band_sample(wp, cfg.grid, cfg.stride, rng)
        m = gather2d(m, rows, cols)
    else:
        m = maxpool2d(m, window=cfg.grid, stride=cfg.stride)
    return squeeze_gap(m)


def squeeze(u: Tensor, params: SeBlockParams, cfg: S3PConfig,
            rng: Rng = None, train: bool = True) -> Tensor:
    if params.squeeze == "gap":
        return squeeze_gap(u)
    if params.squeeze == "gmp":
        return squeeze_gmp(u)
    return squeeze_s3p(u, cfg, rng=rng, train=train)


def excite(z: Tensor, params: SeBlockParams) -> Tensor:
    """Bottleneck MLP: z:[N,C] -> per-channel scales [N,C]."""
    if z.shape[1] != params.w1.shape[0]:
        raise ShapeError(f"excite: {z.shape[1]} channels vs w1 {params.w1.shape}")
    hidden = relu(matmul(z, params.w1))
    return _FINAL_ACT[params.excitation](matmul(hidden, params.w2))


def se_apply(u: Tensor, params: SeBlockParams, cfg: S3PConfig, rng: Rng = None,
             train: bool = True, residual: Tensor = None) -> Tensor:
    """Rescale each channel of u by its excitation scale.

    When `residual` is given (the enclosing stem block's input, already
    shape-matched), it is added after the rescale.
    """
    z = squeeze(u, params, cfg, rng=rng, train=train)
    s = excite(z, params)
    n, c = u.shape[0], u.shape[1]
    out = u * s.reshape(n, c, 1, 1)
    if residual is not None:
        out = out + residual
    return out
