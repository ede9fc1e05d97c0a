"""Capsule layers: primary capsule construction, pose votes, squashing,
and both routing mechanisms (fully-connected ReLU baseline, EM routing).

A capsule is a pose vector of length D plus a scalar activation in
(0,1). EM routing clusters child votes into parent Gaussians: the
M-step refits each parent's mean/variance from activation-weighted
assignments, prices the fit as a per-component cost, and squashes the
negated total cost through a sharpening sigmoid; the E-step re-assigns
children to parents in proportion to parent activation times Gaussian
density. The iteration count is a small fixed constant, so the loop is
an ordinary unrolled graph and gradients flow through every step.

All cross-parent and cross-component reductions use order-invariant
sums, so permuting parents (or pose coordinates) permutes the outputs
bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import (Tensor, conv2d, custom_op, matmul_affine, relu, sigmoid,
                     slice_channels, softmax_or_uniform)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CapsuleField:
    """Per-location capsules flattened into one axis (type-major order)."""

    poses: Tensor        # [N, caps, D]
    activations: Tensor  # [N, caps], values in (0,1)
    grid: Optional[tuple] = None  # (types, H, W) spatial origin, None for class capsules

    @property
    def count(self) -> int:
        return self.poses.shape[1]

    @property
    def dim(self) -> int:
        return self.poses.shape[2]


@dataclass
class PrimaryCapsParams:
    kernel: Tensor  # [types*(dim+1), C, 1, 1]
    bias: Tensor    # [types*(dim+1)]
    types: int
    dim: int

    @classmethod
    def create(cls, in_channels: int, types: int, dim: int, rng: Rng,
               dtype=np.float64) -> "PrimaryCapsParams":
        out = types * (dim + 1)
        k = Tensor(rng.normal((out, in_channels, 1, 1),
                              std=1.0 / math.sqrt(in_channels), dtype=dtype),
                   requires_grad=True)
        b = Tensor(np.zeros(out, dtype=dtype), requires_grad=True)
        return cls(kernel=k, bias=b, types=types, dim=dim)


@dataclass
class TransformParams:
    """Per-(child type, parent) pose transforms, shared across locations."""

    w: Tensor  # [types_in, caps_out, D, D]

    @classmethod
    def create(cls, types_in: int, caps_out: int, dim: int, rng: Rng,
               dtype=np.float64) -> "TransformParams":
        w = Tensor(rng.normal((types_in, caps_out, dim, dim),
                              std=1.0 / math.sqrt(dim), dtype=dtype),
                   requires_grad=True)
        return cls(w=w)


def primary_conv(stem_out: Tensor, params: PrimaryCapsParams) -> Tensor:
    """1x1 conv producing types*(dim+1) channels: poses first, then
    activation logits."""
    expect = params.types * (params.dim + 1)
    if params.kernel.shape[0] != expect:
        raise ConfigError(
            f"primary caps: kernel yields {params.kernel.shape[0]} channels, "
            f"need types*(dim+1) = {expect}")
    return conv2d(stem_out, params.kernel, params.bias, stride=1, pad=0)


def split_pose_map(conv_map: Tensor, types: int, dim: int):
    """(pose channels [N,types*dim,H,W], activation logits [N,types,H,W])."""
    if conv_map.shape[1] != types * (dim + 1):
        raise ConfigError(
            f"primary caps: {conv_map.shape[1]} channels do not split into "
            f"{types} capsules of dim {dim}+1")
    pose_map = slice_channels(conv_map, 0, types * dim)
    act_map = slice_channels(conv_map, types * dim, types * (dim + 1))
    return pose_map, act_map


def caps_from_map(pose_map: Tensor, types: int, dim: int) -> Tensor:
    """[N, types*dim, H, W] -> poses [N, types*H*W, dim], type-major."""
    n, c, h, w = pose_map.shape
    if c != types * dim:
        raise ShapeError(f"caps_from_map: {c} channels != types*dim = {types * dim}")
    x5 = pose_map.data.reshape(n, types, dim, h, w)
    out = np.ascontiguousarray(x5.transpose(0, 1, 3, 4, 2)).reshape(n, types * h * w, dim)

    def bw(g):
        g5 = g.reshape(n, types, h, w, dim).transpose(0, 1, 4, 2, 3)
        return [np.ascontiguousarray(g5).reshape(n, c, h, w)]

    return custom_op("caps_from_map", [pose_map], out, bw)


def field_from_maps(pose_map: Tensor, act_map: Tensor, types: int, dim: int) -> CapsuleField:
    n, _, h, w = pose_map.shape
    poses = caps_from_map(pose_map, types, dim)
    acts = sigmoid(act_map.reshape(n, types * h * w))
    return CapsuleField(poses=poses, activations=acts, grid=(types, h, w))


def primary_capsules(stem_out: Tensor, params: PrimaryCapsParams) -> CapsuleField:
    """Stem features -> capsule field (no SE stage in between)."""
    conv_map = primary_conv(stem_out, params)
    pose_map, act_map = split_pose_map(conv_map, params.types, params.dim)
    return field_from_maps(pose_map, act_map, params.types, params.dim)


def votes(field: CapsuleField, transform: TransformParams) -> Tensor:
    """v[n,i,j] = pose_i @ W[type(i),j]: [N, caps_in, caps_out, D]."""
    w = transform.w
    ti, co, d, d2 = w.shape
    n, ci, dp = field.poses.shape
    if d != d2 or dp != d:
        raise ShapeError(f"votes: pose dim {dp} vs transform {w.shape}")
    if ci % ti != 0:
        raise ShapeError(f"votes: {ci} capsules not a multiple of {ti} types")
    loc = ci // ti
    poses = field.poses
    p5 = poses.data.reshape(n, ti, loc, d)
    out = np.einsum("ntld,tjdh->ntljh", p5, w.data, optimize=True)
    out = out.reshape(n, ci, co, d)

    def bw(g):
        g5 = g.reshape(n, ti, loc, co, d)
        dp_ = np.einsum("ntljh,tjdh->ntld", g5, w.data, optimize=True)
        dw = np.einsum("ntld,ntljh->tjdh", p5, g5, optimize=True)
        return [dp_.reshape(n, ci, d), dw]

    return custom_op("votes", [poses, w], out, bw)


def squash(s: Tensor, c: float = 0.5) -> Tensor:
    """Norm-bounded nonlinearity over the last axis:
    squash(s) = (|s|^2 / (c + |s|^2)) * s/|s|, with squash(0) = 0."""
    sumsq = (s * s).sum(axis=-1, keepdims=True)
    norm = sumsq.sqrt()
    return s * (norm / (sumsq + c))


def relu_route(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully-connected + ReLU routing baseline."""
    return relu(matmul_affine(x, w, b))


def _den_floor(dtype) -> float:
    # keeps 0/0 (and overflow of den**-2 in the division backward) out of
    # the parent statistics when a parent loses all its mass; binds only
    # for parents whose total weight is numerically zero
    return 1e-8 if np.dtype(dtype) == np.float32 else 1e-30


def _child_sum(w: Tensor, x: Tensor) -> Tensor:
    """out[n,j,h] = sum_i w[n,i,j] * x[n,i,j,h].

    The reduction runs identically for every (n,j,h) slice (plain
    axis-1 sum), so permuting parents or pose coordinates permutes the
    output bit-exactly; a BLAS batched matvec would not guarantee that.
    """
    wd, xd = w.data, x.data
    out = (wd[..., None] * xd).sum(axis=1)

    def bw(g):
        dw = np.einsum("nijh,njh->nij", xd, g, optimize=True)
        dx = wd[..., None] * g[:, None, :, :]
        return [dw, dx]

    return custom_op("child_sum", [w, x], out, bw)


def _quad_sum(sq: Tensor, inv2v: Tensor) -> Tensor:
    """Order-invariant sum_h sq[n,i,j,h] * inv2v[n,j,h] -> [n,i,j]."""
    t = sq.data * inv2v.data[:, None]
    out = np.ascontiguousarray(np.sort(t, axis=-1)).sum(axis=-1)

    def bw(g):
        dsq = g[..., None] * inv2v.data[:, None]
        dinv = np.einsum("nijh,nij->njh", sq.data, g, optimize=True)
        return [dsq, dinv]

    return custom_op("quad_sum", [sq, inv2v], out, bw)


def em_routing(votes_t: Tensor, a_in: Tensor, beta_a: Tensor, beta_u: Tensor,
               iters: int = 3, lambda0: float = 1.0, var_floor: float = 1e-4,
               trace: Optional[List[dict]] = None):
    """Cluster child votes into parent capsules by unrolled EM.

    votes_t: [N, caps_in, caps_out, D]; a_in: [N, caps_in] in (0,1);
    beta_a: [caps_out] learned activation offsets; beta_u: learned scalar
    cost constant. Returns (activations [N, caps_out], poses [N, caps_out, D]).

    Assignments start uniform. Each iteration runs the M-step (refit
    parent mean/variance under weights r*a_in, cost per component
    (ln sigma + beta_u) * weight mass, activation through a sigmoid
    sharpened by lambda0 * 2^(iter-1)) and, between iterations, the
    E-step (assignments proportional to parent activation times Gaussian
    density of the vote, normalized per child in log space). When a
    child's normalizer underflows entirely its assignments fall back to
    uniform (logged, not fatal).

    `trace` collects per-iteration numpy snapshots (r, mu, sigma2, j, a)
    for oracle comparison.
    """
    if iters < 1:
        raise ConfigError(f"em_routing: iters must be >= 1, got {iters}")
    n, ci, co, d = votes_t.shape
    if a_in.shape != (n, ci):
        raise ShapeError(f"em_routing: a_in {a_in.shape} vs votes {votes_t.shape}")
    dtype = votes_t.dtype
    floor = _den_floor(dtype)

    r = Tensor(np.full((n, ci, co), 1.0 / co, dtype=dtype))
    a3 = a_in.reshape(n, ci, 1)
    a_out = mu = None
    for it in range(1, iters + 1):
        lam = lambda0 * 2.0 ** (it - 1)

        # M-step
        w = r * a3                                              # [N,ci,co]
        wsum = w.sum(axis=1)                                    # [N,co]
        den = wsum.clip_min(floor).reshape(n, co, 1)
        mu = _child_sum(w, votes_t) / den                       # [N,co,D]
        diff = votes_t - mu.reshape(n, 1, co, d)                # [N,ci,co,D]
        sq = diff * diff
        var = (_child_sum(w, sq) / den).clip_min(var_floor)     # [N,co,D]
        log_var = var.log()
        j = (log_var * 0.5 + beta_u) * wsum.reshape(n, co, 1)   # [N,co,D]
        cost = j.sorted_sum(axis=2)                             # [N,co]
        a_out = sigmoid((beta_a - cost) * lam)                  # [N,co]

        if trace is not None:
            trace.append({"r": r.data.copy(), "mu": mu.data.copy(),
                          "sigma2": var.data.copy(), "j": j.data.copy(),
                          "a": a_out.data.copy()})

        # E-step feeds the next M-step; the final iteration's outputs are
        # (a_out, mu), so it has no E-step to run.
        if it < iters:
            log_norm_sum = ((log_var + LOG_2PI) * (-0.5)).sorted_sum(axis=2)  # [N,co]
            inv2v = 0.5 / var
            logp = log_norm_sum.reshape(n, 1, co) - _quad_sum(sq, inv2v)
            logits = a_out.log().reshape(n, 1, co) + logp       # [N,ci,co]
            r = softmax_or_uniform(logits, axis=2)

    return a_out, mu


def predict(field: CapsuleField) -> np.ndarray:
    """Class index per sample: argmax activation, ties to lowest index."""
    return np.argmax(field.activations.data, axis=1)
