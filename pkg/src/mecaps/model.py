"""The assembled network: SE conv stem, primary capsules, SE on the
capsule pose map, EM-routed class capsules, and the masked decoder.

Also houses the composite loss, the Adam optimizer, metric computation,
and the binary checkpoint format.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import capsules as caps
from . import reconstruction as recon
from . import seblock as se
from .config import TrainConfig, from_flat, to_flat
from .errors import CheckpointError, ConfigError, ShapeError
from .rng import Rng, STREAM_INIT
from .tensor import Tensor, conv2d, relu

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MECAPS01"
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class StemBlock:
    kernel: Tensor
    bias: Tensor
    se_params: se.SeBlockParams
    shortcut: Optional[Tensor]  # 1x1 projection kernel when shape changes
    stride: int
    pad: int


@dataclass
class ForwardOut:
    activations: Tensor   # [N, classes]
    poses: Tensor         # [N, classes, D]
    reconstruction: Tensor  # [N, C, H, W]

    @property
    def class_field(self) -> caps.CapsuleField:
        return caps.CapsuleField(poses=self.poses, activations=self.activations)


class MECapsNet:
    """End-to-end network for one dataset geometry."""

    def __init__(self, config: TrainConfig, image_shape: tuple, classes: int = 10,
                 rng: Optional[Rng] = None):
        config.validate()
        self.config = config
        self.image_shape = tuple(image_shape)  # (C, H, W)
        self.classes = classes
        self.dtype = np.float32 if config.precision == 32 else np.float64
        rng = rng or Rng(config.seed, STREAM_INIT)

        c_in, h, w = self.image_shape
        wid = config.stem_width
        plan = [(wid, 5, 1), (2 * wid, 3, 2), (4 * wid, 3, 2)]
        self.stem: List[StemBlock] = []
        ch, hh, ww = c_in, h, w
        for width, ksize, stride in plan:
            if width % config.reduction != 0:
                raise ConfigError(
                    f"stem width {width} not divisible by SE reduction {config.reduction}")
            pad = ksize // 2
            kernel = Tensor(rng.normal((width, ch, ksize, ksize),
                                       std=math.sqrt(2.0 / (ch * ksize * ksize)),
                                       dtype=self.dtype), requires_grad=True)
            bias = Tensor(np.zeros(width, dtype=self.dtype), requires_grad=True)
            se_params = se.SeBlockParams.create(width, config.reduction, rng,
                                                squeeze=config.squeeze,
                                                excitation=config.excitation,
                                                dtype=self.dtype)
            shortcut = None
            if ch != width or stride != 1:
                shortcut = Tensor(rng.normal((width, ch, 1, 1),
                                             std=math.sqrt(1.0 / ch),
                                             dtype=self.dtype), requires_grad=True)
            self.stem.append(StemBlock(kernel, bias, se_params, shortcut, stride, pad))
            ch = width
            hh = (hh + 2 * pad - ksize) // stride + 1
            ww = (ww + 2 * pad - ksize) // stride + 1
        self.feature_grid = (hh, ww)

        t, d = config.num_capsules, config.capsule_dim
        self.primary = caps.PrimaryCapsParams.create(ch, t, d, rng, dtype=self.dtype)
        pose_channels = t * d
        if pose_channels % config.reduction != 0:
            raise ConfigError(
                f"capsule pose channels {pose_channels} not divisible by "
                f"SE reduction {config.reduction}")
        self.se_cc = se.SeBlockParams.create(pose_channels, config.reduction, rng,
                                             squeeze=config.squeeze,
                                             excitation=config.excitation,
                                             dtype=self.dtype)
        self.transform = caps.TransformParams.create(t, classes, d, rng, dtype=self.dtype)

        caps_in = t * hh * ww
        k0 = math.log(2.0 * math.pi) / 2.0
        # the routing cost scales with the weight mass per parent times the
        # pose dimension (~ caps_in * D / (2 * classes)); the sharpening
        # sigmoid only has usable slope for O(1) arguments, so the model
        # divides that factor out of its lambda schedule and keeps the
        # learned activation offsets in O(1) units (scaled back up to cost
        # units in forward) so Adam-sized steps stay meaningful
        self._cost_scale = caps_in * d / (2.0 * classes)
        self.routing_lambda0 = config.lambda0 / self._cost_scale
        self.beta_a = Tensor(np.zeros(classes, dtype=self.dtype), requires_grad=True)
        self.beta_u = Tensor(np.asarray(k0, dtype=self.dtype), requires_grad=True)

        out_pixels = int(np.prod(self.image_shape))
        dec_in = d if config.decoder_input == "pose" else classes
        self.decoder = recon.DecoderParams.create(dec_in, config.decoder_hidden,
                                                  out_pixels, rng, dtype=self.dtype)
        self.recon_weight = (config.recon_weight if config.recon_weight is not None
                             else 0.0005 * out_pixels)
        self.s3p = se.S3PConfig(grid=config.s3p_grid, stride=config.s3p_stride)

    # parameter registry

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for i, blk in enumerate(self.stem):
            params[f"stem.{i}.kernel"] = blk.kernel
            params[f"stem.{i}.bias"] = blk.bias
            params[f"stem.{i}.se.w1"] = blk.se_params.w1
            params[f"stem.{i}.se.w2"] = blk.se_params.w2
            if blk.shortcut is not None:
                params[f"stem.{i}.shortcut"] = blk.shortcut
        params["primary.kernel"] = self.primary.kernel
        params["primary.bias"] = self.primary.bias
        params["se_cc.w1"] = self.se_cc.w1
        params["se_cc.w2"] = self.se_cc.w2
        params["transform.w"] = self.transform.w
        params["routing.beta_a"] = self.beta_a
        params["routing.beta_u"] = self.beta_u
        params["decoder.fc1_w"] = self.decoder.fc1_w
        params["decoder.fc1_b"] = self.decoder.fc1_b
        params["decoder.fc2_w"] = self.decoder.fc2_w
        params["decoder.fc2_b"] = self.decoder.fc2_b
        return params

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def param_report(self) -> str:
        rows = [f"{path:<20s} {str(p.data.shape):<20s} {p.data.size}"
                for path, p in self.parameters().items()]
        rows.append(f"{'total':<20s} {'':<20s} {self.param_count()}")
        return "\n".join(rows)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    # forward

    def forward(self, images: np.ndarray, train: bool = True, rng: Optional[Rng] = None,
                labels: Optional[np.ndarray] = None) -> ForwardOut:
        """Full pass. Training mode needs `rng` (stochastic squeeze) and
        uses `labels` for decoder masking; eval masks by prediction."""
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim != 4 or images.shape[1:] != self.image_shape:
            raise ShapeError(f"forward: images {images.shape} vs expected "
                             f"[N,{','.join(map(str, self.image_shape))}]")
        x = Tensor(images)
        for blk in self.stem:
            u = conv2d(x, blk.kernel, blk.bias, stride=blk.stride, pad=blk.pad)
            short = x if blk.shortcut is None else conv2d(x, blk.shortcut, None,
                                                          stride=blk.stride, pad=0)
            x = relu(se.se_apply(u, blk.se_params, self.s3p, rng=rng, train=train,
                                 residual=short))

        conv_map = caps.primary_conv(x, self.primary)
        pose_map, act_map = caps.split_pose_map(conv_map, self.primary.types,
                                                self.primary.dim)
        pose_map = se.se_apply(pose_map, self.se_cc, self.s3p, rng=rng, train=train)
        fld = caps.field_from_maps(pose_map, act_map, self.primary.types,
                                   self.primary.dim)

        v = caps.votes(fld, self.transform)
        a_out, mu = caps.em_routing(v, fld.activations,
                                    self.beta_a * self._cost_scale, self.beta_u,
                                    iters=self.config.routing_iters,
                                    lambda0=self.routing_lambda0,
                                    var_floor=self.config.var_floor)

        class_field = caps.CapsuleField(poses=mu, activations=a_out)
        if self.config.decoder_input == "pose":
            z = recon.mask_by_layer(class_field, target=labels if train else None,
                                    squash_c=self.config.squash_c)
        else:
            z = caps.squash(a_out, c=self.config.squash_c)
        reconstruction = recon.decode(z, self.decoder, self.image_shape)
        return ForwardOut(activations=a_out, poses=mu, reconstruction=reconstruction)

    def loss(self, out: ForwardOut, images: np.ndarray, labels: np.ndarray):
        """(total, classification, reconstruction) loss tensors."""
        if self.config.loss == "margin":
            cls = margin_loss(out.activations, labels,
                              down_weight=self.config.margin_down_weight)
        else:
            cls = spread_loss(out.activations, labels, margin=self.config.spread_margin)
        rec = recon.mse(out.reconstruction, Tensor(np.asarray(images, dtype=self.dtype)))
        return total_loss(cls, rec, self.recon_weight), cls, rec


# losses


def margin_loss(activations: Tensor, labels: np.ndarray, down_weight: float = 0.5,
                m_pos: float = 0.9, m_neg: float = 0.1) -> Tensor:
    """Two-sided margin loss on class activations, mean over the batch."""
    n, k = activations.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"margin_loss: invalid labels for {k} classes")
    onehot = np.zeros((n, k), dtype=activations.dtype)
    onehot[np.arange(n), labels] = 1.0
    hot = Tensor(onehot)
    pos = relu(m_pos - activations)
    neg = relu(activations - m_neg)
    per_sample = (hot * pos * pos + down_weight * (1.0 - hot) * neg * neg).sum(axis=1)
    return per_sample.mean()


def spread_loss(activations: Tensor, labels: np.ndarray, margin: float = 0.2) -> Tensor:
    """Hinge on the gap between the target activation and each other class."""
    n, k = activations.shape
    labels = np.asarray(labels)
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"spread_loss: invalid labels for {k} classes")
    from .tensor import take_per_row
    a_y = take_per_row(activations, labels).reshape(n, 1)
    mask = np.ones((n, k), dtype=activations.dtype)
    mask[np.arange(n), labels] = 0.0
    gap = relu(margin - (a_y - activations))
    return (Tensor(mask) * gap * gap).sum(axis=1).mean()


def total_loss(classification: Tensor, reconstruction: Tensor,
               recon_weight: float) -> Tensor:
    return classification + recon_weight * reconstruction


# optimizer


class Adam:
    """Adam with bias correction; learning rate supplied per step so the
    caller owns the per-epoch decay schedule."""

    def __init__(self, params: Dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for key, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One in-place Adam update for a single parameter array (t >= 1)."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


# evaluation


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    recon_loss: float
    per_class_accuracy: List[float]
    confusion: np.ndarray  # [classes, classes], rows = true, cols = predicted
    count: int

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "recon_loss": self.recon_loss,
            "per_class_accuracy": self.per_class_accuracy,
            "count": self.count,
        }


def evaluate(model: MECapsNet, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 128) -> EvalResult:
    """Deterministic eval-mode metrics over a split."""
    n = images.shape[0]
    if n == 0:
        raise ConfigError("evaluate: empty split")
    k = model.classes
    confusion = np.zeros((k, k), dtype=np.int64)
    loss_sum = 0.0
    rec_sum = 0.0
    for lo in range(0, n, batch_size):
        bx = images[lo:lo + batch_size]
        by = labels[lo:lo + batch_size]
        out = model.forward(bx, train=False)
        pred = caps.predict(out.class_field)
        for t, p in zip(by, pred):
            confusion[int(t), int(p)] += 1
        total, _, rec = model.loss(out, bx, by)
        loss_sum += total.item() * len(by)
        rec_sum += rec.item() * len(by)
    correct = np.trace(confusion)
    row_totals = confusion.sum(axis=1)
    per_class = [float(confusion[i, i] / row_totals[i]) if row_totals[i] else 0.0
                 for i in range(k)]
    return EvalResult(accuracy=float(correct / n), loss=loss_sum / n,
                      recon_loss=rec_sum / n, per_class_accuracy=per_class,
                      confusion=confusion, count=n)


# checkpoints: little-endian binary, magic + JSON header + tensor records


def save_checkpoint(path, model: MECapsNet, epoch: int) -> None:
    header = {
        "config": to_flat(model.config),
        "epoch": epoch,
        "classes": model.classes,
        "image_shape": list(model.image_shape),
        "rng": {"seed": model.config.seed, "next_epoch": epoch + 1},
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    params = model.parameters()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hjson)))
        f.write(hjson)
        f.write(struct.pack("<I", len(params)))
        for key, p in params.items():
            kb = key.encode("utf-8")
            arr = np.ascontiguousarray(p.data)
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            f.write(struct.pack("<H", len(kb)))
            f.write(kb)
            f.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """-> (config, epoch, image_shape, classes, {path: array})."""
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:8]!r}")
    off = 8
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", blob, off)
        off += 2
        key = blob[off:off + klen].decode("utf-8")
        off += klen
        tag, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {key}")
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape)) * dtype.itemsize
        if off + nbytes > len(blob):
            raise CheckpointError(f"checkpoint truncated in tensor {key}")
        params[key] = np.frombuffer(blob[off:off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
    cfg = from_flat(header["config"])
    return cfg, header["epoch"], tuple(header["image_shape"]), header["classes"], params


def model_from_checkpoint(path) -> tuple:
    """Rebuild a model with checkpointed weights: -> (model, epoch)."""
    cfg, epoch, image_shape, classes, params = load_checkpoint(path)
    model = MECapsNet(cfg, image_shape, classes=classes)
    own = model.parameters()
    missing = set(own) - set(params)
    extra = set(params) - set(own)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} "
                              f"extra={sorted(extra)}")
    for key, arr in params.items():
        if own[key].data.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {key}: "
                                  f"{own[key].data.shape} vs {arr.shape}")
        own[key].data = arr.astype(model.dtype, copy=True)
    return model, epoch
