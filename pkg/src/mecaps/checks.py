"""Registered finite-difference checks for every differentiable op.

Each builder returns (fn, inputs): fn maps Tensors to a scalar and is
pure (stochastic ops rebuild a frozen Rng per call). Scopes follow the
module layout so `gradcheck --scope se-block` etc. select a subset.
"""

from __future__ import annotations

import numpy as np

from . import reconstruction as recon
from .capsules import (CapsuleField, PrimaryCapsParams, TransformParams,
                       em_routing, primary_capsules, relu_route, squash, votes)
from .gradcheck import register
from .model import margin_loss, spread_loss
from .rng import Rng
from .seblock import (S3PConfig, SeBlockParams, excite, se_apply, squeeze_gap,
                      squeeze_gmp, squeeze_s3p)
from .tensor import (Tensor, conv2d, leaky_relu, matmul_affine, maxpool2d,
                     relu, sigmoid, softmax, tanh)

_S3P = S3PConfig(grid=4, stride=2)


def _mix(shape, rng):
    """Fixed projection weights so vector-valued ops reduce to a scalar."""
    return Tensor(rng.normal(shape))


def _away_from_zero(a, margin=0.3):
    return a + margin * np.sign(a) + (a == 0) * margin


# tensor-core

@register("conv2d", "tensor-core")
def _conv2d(rng: Rng):
    w = _mix((2, 3, 5, 5), rng)
    return (lambda x, k, b: (conv2d(x, k, b, stride=1, pad=1) * w).sum(),
            [rng.normal((2, 2, 5, 5)), rng.normal((3, 2, 3, 3)), rng.normal((3,))])


@register("conv2d_strided", "tensor-core")
def _conv2d_strided(rng: Rng):
    w = _mix((1, 2, 3, 3), rng)
    return (lambda x, k: (conv2d(x, k, None, stride=2, pad=0) * w).sum(),
            [rng.normal((1, 1, 7, 7)), rng.normal((2, 1, 3, 3))])


@register("matmul_affine", "tensor-core")
def _affine(rng: Rng):
    w = _mix((4, 3), rng)
    return (lambda x, W, b: (matmul_affine(x, W, b) * w).sum(),
            [rng.normal((4, 5)), rng.normal((5, 3)), rng.normal((3,))])


@register("relu", "tensor-core", tol=1e-6)
def _relu(rng: Rng):
    w = _mix((4, 6), rng)
    return (lambda x: (relu(x) * w).sum(), [_away_from_zero(rng.normal((4, 6)))])


@register("leaky_relu", "tensor-core", tol=1e-6)
def _leaky(rng: Rng):
    w = _mix((4, 6), rng)
    return (lambda x: (leaky_relu(x, 0.1) * w).sum(),
            [_away_from_zero(rng.normal((4, 6)))])


@register("sigmoid", "tensor-core", tol=1e-6)
def _sigmoid(rng: Rng):
    w = _mix((4, 6), rng)
    return (lambda x: (sigmoid(x) * w).sum(), [rng.normal((4, 6))])


@register("tanh", "tensor-core", tol=1e-6)
def _tanh(rng: Rng):
    w = _mix((4, 6), rng)
    return (lambda x: (tanh(x) * w).sum(), [rng.normal((4, 6))])


@register("softmax", "tensor-core", tol=1e-6)
def _softmax(rng: Rng):
    w = _mix((4, 6), rng)
    return (lambda x: (softmax(x, axis=1) * w).sum(), [rng.normal((4, 6))])


@register("maxpool2d", "tensor-core")
def _maxpool(rng: Rng):
    w = _mix((1, 2, 6, 6), rng)
    return (lambda x: (maxpool2d(x, 3, 1, same=True) * w).sum(),
            [rng.normal((1, 2, 6, 6))])


# se-block

@register("squeeze_gap", "se-block", tol=1e-6)
def _gap(rng: Rng):
    w = _mix((2, 3), rng)
    return (lambda u: (squeeze_gap(u) * w).sum(), [rng.normal((2, 3, 6, 6))])


@register("squeeze_gmp", "se-block")
def _gmp(rng: Rng):
    w = _mix((2, 3), rng)
    return (lambda u: (squeeze_gmp(u) * w).sum(), [rng.normal((2, 3, 6, 6))])


@register("squeeze_s3p", "se-block")
def _s3p(rng: Rng):
    w = _mix((2, 3), rng)
    return (lambda u: (squeeze_s3p(u, _S3P, rng=Rng(7, 0), train=True) * w).sum(),
            [rng.normal((2, 3, 8, 8))])


@register("excite", "se-block")
def _excite(rng: Rng):
    w = _mix((2, 4), rng)

    def fn(z, w1, w2):
        p = SeBlockParams(w1=w1, w2=w2, reduction=2)
        return (excite(z, p) * w).sum()

    return fn, [rng.normal((2, 4)), rng.normal((4, 2)), rng.normal((2, 4))]


@register("se_apply", "se-block")
def _se_apply(rng: Rng):
    w = _mix((2, 4, 8, 8), rng)

    def fn(u, w1, w2):
        p = SeBlockParams(w1=w1, w2=w2, reduction=2, squeeze="s3p")
        return (se_apply(u, p, _S3P, rng=Rng(9, 1), train=True) * w).sum()

    return fn, [rng.normal((2, 4, 8, 8)), rng.normal((4, 2)), rng.normal((2, 4))]


# capsules

@register("squash", "capsules")
def _squash(rng: Rng):
    w = _mix((3, 4), rng)
    return (lambda s: (squash(s, c=0.5) * w).sum(), [rng.normal((3, 4))])


@register("votes", "capsules")
def _votes(rng: Rng):
    w = _mix((2, 6, 3, 4), rng)

    def fn(poses, wt):
        fld = CapsuleField(poses=poses, activations=Tensor(np.full((2, 6), 0.5)))
        return (votes(fld, TransformParams(w=wt)) * w).sum()

    return fn, [rng.normal((2, 6, 4)), rng.normal((2, 3, 4, 4))]


@register("relu_route", "capsules")
def _relu_route(rng: Rng):
    w = _mix((3, 4), rng)
    return (lambda x, W, b: (relu_route(x, W, b) * w).sum(),
            [rng.normal((3, 5)), rng.normal((5, 4)),
             _away_from_zero(rng.normal((4,)), 0.5)])


@register("primary_capsules", "capsules")
def _primary(rng: Rng):
    wp = _mix((2, 2 * 3 * 3, 4), rng)
    wa = _mix((2, 2 * 3 * 3), rng)

    def fn(stem, k, b):
        fld = primary_capsules(stem, PrimaryCapsParams(kernel=k, bias=b, types=2, dim=4))
        return (fld.poses * wp).sum() + (fld.activations * wa).sum()

    return fn, [rng.normal((2, 5, 3, 3)), rng.normal((2 * 5, 5, 1, 1)),
                rng.normal((2 * 5,))]


@register("em_routing", "capsules", tol=1e-3)
def _em(rng: Rng):
    n, ci, co, d = 2, 4, 3, 3
    wa = _mix((n, co), rng)
    wm = _mix((n, co, d), rng)

    def fn(v, a, b, k):
        a_out, mu = em_routing(v, a, b, k, iters=2)
        return (a_out * wa).sum() + (mu * wm).sum()

    return fn, [rng.normal((n, ci, co, d)), rng.uniform((n, ci), 0.2, 0.9),
                rng.normal((co,), std=0.5), np.asarray(0.9189)]


# reconstruction

@register("decode", "reconstruction")
def _decode(rng: Rng):
    w = _mix((2, 1, 4, 4), rng)

    def fn(z, f1w, f1b, f2w, f2b):
        p = recon.DecoderParams(fc1_w=f1w, fc1_b=f1b, fc2_w=f2w, fc2_b=f2b)
        return (recon.decode(z, p, (1, 4, 4)) * w).sum()

    return fn, [rng.normal((2, 4)), rng.normal((4, 8)),
                _away_from_zero(rng.normal((8,)), 0.5), rng.normal((8, 16)),
                rng.normal((16,))]


@register("mask_decode", "reconstruction")
def _mask_decode(rng: Rng):
    w = _mix((2, 1, 3, 3), rng)
    f1w = _mix((4, 6), rng)
    f1b = Tensor(_away_from_zero(rng.normal((6,)), 0.5))
    f2w = _mix((6, 9), rng)
    f2b = _mix((9,), rng)
    target = np.array([1, 0])

    def fn(poses):
        fld = CapsuleField(poses=poses, activations=Tensor(np.full((2, 3), 0.5)))
        z = recon.mask_by_layer(fld, target=target)
        p = recon.DecoderParams(fc1_w=f1w, fc1_b=f1b, fc2_w=f2w, fc2_b=f2b)
        return (recon.decode(z, p, (1, 3, 3)) * w).sum()

    return fn, [rng.normal((2, 3, 4))]


@register("mse", "reconstruction", tol=1e-6)
def _mse(rng: Rng):
    return (lambda y, y0: recon.mse(y, y0), [rng.normal((2, 3, 4, 4)),
                                             rng.normal((2, 3, 4, 4))])


# model losses

@register("margin_loss", "model", tol=1e-6)
def _margin(rng: Rng):
    labels = np.array([0, 2, 1])
    return (lambda a: margin_loss(a, labels, down_weight=0.5),
            [rng.uniform((3, 4), 0.15, 0.85)])


@register("spread_loss", "model", tol=1e-6)
def _spread(rng: Rng):
    labels = np.array([0, 2, 1])
    # keep activation gaps away from the hinge corner at `margin`
    a = rng.uniform((3, 4), 0.0, 1.0)
    a[np.abs((a[np.arange(3), labels][:, None] - a) - 0.2) < 0.05] += 0.1
    return (lambda t: spread_loss(t, labels, margin=0.2), [a])
