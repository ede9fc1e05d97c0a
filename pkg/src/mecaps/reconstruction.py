"""Mask-by-layer selection and the two-layer reconstruction decoder.

Only the target class capsule's pose (true label during training, the
predicted class at evaluation) reaches the decoder; every other class
contributes nothing. The decoder maps the squashed pose through two
fully connected layers (ReLU, then sigmoid) back to image shape, scored
by mean squared error against the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .rng import Rng
from .tensor import Tensor, matmul_affine, relu, sigmoid, take_per_row
from .capsules import CapsuleField, predict, squash


@dataclass
class DecoderParams:
    fc1_w: Tensor  # [Din, hidden]
    fc1_b: Tensor  # [hidden]
    fc2_w: Tensor  # [hidden, out_pixels]
    fc2_b: Tensor  # [out_pixels]

    @classmethod
    def create(cls, in_dim: int, hidden: int, out_pixels: int, rng: Rng,
               dtype=np.float64) -> "DecoderParams":
        return cls(
            fc1_w=Tensor(rng.normal((in_dim, hidden), std=1.0 / math.sqrt(in_dim),
                                    dtype=dtype), requires_grad=True),
            fc1_b=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            fc2_w=Tensor(rng.normal((hidden, out_pixels), std=1.0 / math.sqrt(hidden),
                                    dtype=dtype), requires_grad=True),
            fc2_b=Tensor(np.zeros(out_pixels, dtype=dtype), requires_grad=True),
        )


def mask_by_layer(class_field: CapsuleField, target: np.ndarray = None,
                  squash_c: float = 0.5) -> Tensor:
    """Squashed pose of the selected class capsule, [N, D].

    `target` gives per-sample class indices (training, true labels);
    None selects each sample's predicted class (evaluation).
    """
    n, classes, _ = class_field.poses.shape
    if target is None:
        target = predict(class_field)
    target = np.asarray(target)
    if target.shape != (n,):
        raise ShapeError(f"mask_by_layer: target shape {target.shape}, want ({n},)")
    if target.min() < 0 or target.max() >= classes:
        raise IndexError(f"mask_by_layer: class index out of range 0..{classes - 1}")
    selected = take_per_row(class_field.poses, target)
    return squash(selected, c=squash_c)


def decode(z: Tensor, params: DecoderParams, image_shape: tuple) -> Tensor:
    """z:[N,Din] -> reconstructed image [N,C,H,W], values in (0,1)."""
    c, h, w = image_shape
    if params.fc2_w.shape[1] != c * h * w:
        raise ShapeError(f"decode: decoder emits {params.fc2_w.shape[1]} pixels, "
                         f"image needs {c * h * w}")
    hidden = relu(matmul_affine(z, params.fc1_w, params.fc1_b))
    flat = sigmoid(matmul_affine(hidden, params.fc2_w, params.fc2_b))
    return flat.reshape(z.shape[0], c, h, w)


def mse(y: Tensor, y0: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if y.shape != y0.shape:
        raise ShapeError(f"mse: shapes {y.shape} vs {y0.shape}")
    d = y - y0
    return (d * d).mean()


def write_pgm(path, img: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a [H,W] array in [0,1]."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ShapeError(f"write_pgm: need [H,W], got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255) from a [3,H,W] array in [0,1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"write_ppm: need [3,H,W], got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    _, h, w = data.shape
    interleaved = data.transpose(1, 2, 0)  # H,W,3
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + interleaved.tobytes())


def write_image(path, img: np.ndarray) -> None:
    """PGM for single-channel images, PPM for three-channel."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 3:
        write_ppm(path, img)
    else:
        write_pgm(path, img)
