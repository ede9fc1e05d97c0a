"""Dataset parsing and batching.

IDX is the big-endian container used by the MNIST-family datasets
(magic, dimension sizes, raw uint8 payload); CIFAR-10 ships as fixed
3073-byte records (label byte + 3072 channel-major pixels). Pixels are
mapped to [0,1] by /255. The batch iterator shuffles with a permutation
that is a pure function of (seed, epoch).
"""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import DataFormatError
from .rng import Rng, STREAM_SHUFFLE

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

DATA_DIR_ENV = "MECAPS_DATA_DIR"

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixels


@dataclass(frozen=True)
class DatasetSpec:
    id: str
    image_shape: tuple  # (C, H, W)
    classes: int
    train_size: int
    test_size: int


SPECS = {
    "mnist": DatasetSpec("mnist", (1, 28, 28), 10, 50000, 10000),
    "fashion_mnist": DatasetSpec("fashion_mnist", (1, 28, 28), 10, 50000, 10000),
    "kmnist": DatasetSpec("kmnist", (1, 28, 28), 10, 50000, 10000),
    "cifar10": DatasetSpec("cifar10", (3, 32, 32), 10, 50000, 10000),
}


@dataclass
class Batch:
    images: np.ndarray  # [N, C, H, W], values in [0, 1]
    labels: np.ndarray  # [N] int class indices


def parse_idx(data: bytes) -> Tuple[np.ndarray, tuple]:
    """Decode one IDX file: -> (items, item_shape).

    Image files (magic 0x00000803) yield float32 [N, H, W] scaled to
    [0,1]; label files (magic 0x00000801) yield int64 [N].
    """
    if len(data) < 4:
        raise DataFormatError(f"IDX header truncated: {len(data)} bytes")
    (magic,) = struct.unpack_from(">I", data, 0)
    dtype_tag = (magic >> 8) & 0xFF
    ndim = magic & 0xFF
    if magic not in (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC):
        if (magic >> 16) != 0 or dtype_tag != 0x08:
            raise DataFormatError(f"bad IDX magic 0x{magic:08x}"
                                  + ("" if (magic >> 16) == 0 else " (not an IDX file)")
                                  + ("" if dtype_tag == 0x08 else
                                     f": unsupported dtype tag 0x{dtype_tag:02x}"))
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}: {ndim} dimensions "
                              "not supported (want 1 or 3)")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError(f"IDX header truncated: expected {header} bytes, "
                              f"got {len(data)}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    expected = header + int(np.prod(dims))
    if len(data) != expected:
        raise DataFormatError(f"IDX payload truncated: expected {expected} bytes, "
                              f"got {len(data)}")
    raw = np.frombuffer(data, dtype=np.uint8, offset=header)
    if magic == IDX_LABEL_MAGIC:
        return raw.astype(np.int64), ()
    items = raw.reshape(dims).astype(np.float32) / 255.0
    return items, tuple(dims[1:])


def to_idx_bytes(items: np.ndarray) -> bytes:
    """Inverse of parse_idx for round-trip checks and fixture files.

    Float arrays in [0,1] are quantized back to uint8; integer arrays
    become a label file.
    """
    items = np.asarray(items)
    if np.issubdtype(items.dtype, np.integer):
        payload = items.astype(np.uint8).tobytes()
        return struct.pack(">II", IDX_LABEL_MAGIC, items.shape[0]) + payload
    if items.ndim != 3:
        raise DataFormatError(f"image IDX needs [N,H,W], got {items.shape}")
    raw = np.clip(np.rint(items * 255.0), 0, 255).astype(np.uint8)
    head = struct.pack(">IIII", IDX_IMAGE_MAGIC, *items.shape)
    return head + raw.tobytes()


def parse_cifar10(data: bytes) -> Tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR-10 binary records: -> (images [N,3,32,32], labels [N])."""
    if len(data) % CIFAR_RECORD != 0:
        raise DataFormatError(f"CIFAR-10 payload length {len(data)} not a multiple "
                              f"of {CIFAR_RECORD}")
    n = len(data) // CIFAR_RECORD
    if n == 0:
        return (np.zeros((0, 3, 32, 32), dtype=np.float32),
                np.zeros(0, dtype=np.int64))
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"CIFAR-10 record {bad} has label byte "
                              f"{labels[bad]} > 9")
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _read_maybe_gz(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _find_file(data_dir: Path, dataset: str, name: str) -> Path:
    for base in (data_dir / dataset, data_dir):
        for candidate in (base / name, base / (name + ".gz")):
            if candidate.is_file():
                return candidate
    raise FileNotFoundError(
        f"dataset file {name}[.gz] not found under {data_dir} or {data_dir / dataset}")


def resolve_data_dir(arg: Optional[str] = None) -> Path:
    path = arg or os.environ.get(DATA_DIR_ENV)
    if not path:
        raise FileNotFoundError(
            f"no data directory: pass --data-dir or set ${DATA_DIR_ENV}")
    return Path(path)


def load_split(dataset: str, data_dir, split: str) -> Tuple[np.ndarray, np.ndarray]:
    """-> (images [N,C,H,W] float32 in [0,1], labels [N] int64)."""
    spec = SPECS[dataset]
    data_dir = Path(data_dir)
    if dataset == "cifar10":
        if split == "train":
            paths = []
            for i in range(1, 6):
                try:
                    paths.append(_find_file(data_dir, dataset, f"data_batch_{i}.bin"))
                except FileNotFoundError:
                    break
            if not paths:
                raise FileNotFoundError(f"no data_batch_*.bin under {data_dir}")
        else:
            paths = [_find_file(data_dir, dataset, "test_batch.bin")]
        parts = [parse_cifar10(_read_maybe_gz(p)) for p in paths]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
    else:
        img_name, lbl_name = IDX_FILES[split]
        images, item_shape = parse_idx(_read_maybe_gz(_find_file(data_dir, dataset,
                                                                 img_name)))
        labels, _ = parse_idx(_read_maybe_gz(_find_file(data_dir, dataset, lbl_name)))
        if item_shape != spec.image_shape[1:]:
            raise DataFormatError(f"{dataset} images are {item_shape}, expected "
                                  f"{spec.image_shape[1:]}")
        if len(images) != len(labels):
            raise DataFormatError(f"{dataset} {split}: {len(images)} images vs "
                                  f"{len(labels)} labels")
        images = images[:, None, :, :]  # add channel axis

    expected = spec.train_size if split == "train" else spec.test_size
    if len(images) != expected:
        log.warning("%s %s split has %d items (reference size %d)",
                    dataset, split, len(images), expected)
    if labels.size and (labels.min() < 0 or labels.max() >= spec.classes):
        raise DataFormatError(f"{dataset} labels outside [0,{spec.classes})")
    return images, labels


def batch_iter(images: np.ndarray, labels: np.ndarray, batch_size: int,
               seed: int, epoch: int) -> Iterator[Batch]:
    """Deterministic shuffled batches; the last short batch is kept."""
    n = len(images)
    perm = Rng(seed, STREAM_SHUFFLE + epoch).permutation(n)
    for lo in range(0, n, batch_size):
        idx = perm[lo:lo + batch_size]
        yield Batch(images=images[idx], labels=labels[idx])
