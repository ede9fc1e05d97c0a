"""Dense tensors with hand-written reverse-mode differentiation.

Every differentiable operation records an OpNode carrying a closure over
the activations its backward pass needs. `backward(loss)` replays the
nodes reachable from the loss in exact reverse order of forward
construction and accumulates gradients into the participating tensors.

Precision policy: float64 for gradient checks and unit tests, float32
for training. Ops preserve the dtype of their inputs.
"""

from __future__ import annotations

import itertools
import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import GraphError, ShapeError

log = logging.getLogger(__name__)

_SEQ = itertools.count()


class OpNode:
    """One recorded forward op: inputs plus the closure for its backward."""

    __slots__ = ("name", "inputs", "backward_fn", "seq")

    def __init__(self, name: str, inputs: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]]):
        self.name = name
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.seq = next(_SEQ)


class Tensor:
    """A dense array with value, lazily allocated gradient, and op history.

    Tensors produced by ops are treated as immutable; parameters are the
    only tensors whose `.data` is updated in place (by the optimizer).
    """

    __slots__ = ("data", "grad", "node", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[OpNode] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.node.name if self.node else ("param" if self.requires_grad else "leaf")
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={tag})"

    # arithmetic: scalars are folded into the closure, tensors broadcast

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return _result("neg", [self], -self.data, lambda g: [-g])

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            return add(self, -_as_float(other))
        out = self.data - other.data
        sa, sb = self.data.shape, other.data.shape
        return _result("sub", [self, other], out,
                       lambda g: [_unbroadcast(g, sa), _unbroadcast(-g, sb)])

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / _as_float(other))

    def __rtruediv__(self, other):
        return div(_constant_like(other, self), self)

    def __pow__(self, p):
        p = _as_float(p)
        x = self.data
        out = x ** p

        def bw(g):
            return [g * p * x ** (p - 1.0)]

        return _result("pow", [self], out, bw)

    # shape ops

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return _result("reshape", [self], self.data.reshape(shape),
                       lambda g: [g.reshape(old)])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _result("transpose", [self], self.data.transpose(axes),
                       lambda g: [g.transpose(inv)])

    # reductions

    def sum(self, axis=None, keepdims: bool = False):
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def bw(g):
            return [_spread(g, shape, axis, keepdims)]

        return _result("sum", [self], out, bw)

    def sorted_sum(self, axis: int):
        """Sum along one axis, order-invariant.

        The operands are sorted before reduction, so any permutation of
        the inputs along `axis` produces a bit-identical sum. Used where
        exact permutation equivariance is asserted (EM routing). The
        sorted array is made contiguous first: numpy's reduction order
        depends on memory layout, not just values.
        """
        out = np.ascontiguousarray(np.sort(self.data, axis=axis)).sum(axis=axis)
        shape = self.data.shape

        def bw(g):
            return [_spread(g, shape, axis, False)]

        return _result("sorted_sum", [self], out, bw)

    def mean(self, axis=None, keepdims: bool = False):
        out = self.data.mean(axis=axis, keepdims=keepdims)
        shape = self.data.shape
        count = self.data.size if axis is None else np.prod(
            [shape[a] for a in _norm_axes(axis, len(shape))])

        def bw(g):
            return [_spread(g, shape, axis, keepdims) / count]

        return _result("mean", [self], out, bw)

    def amax(self, axis: int):
        """Max along one axis; the gradient routes to the first argmax."""
        xm = np.moveaxis(self.data, axis, -1)
        idx = xm.argmax(axis=-1)
        out = np.take_along_axis(xm, idx[..., None], axis=-1)[..., 0]
        shape = self.data.shape

        def bw(g):
            gm = np.zeros(xm.shape, dtype=g.dtype)
            np.put_along_axis(gm, idx[..., None], g[..., None], axis=-1)
            return [np.moveaxis(gm, -1, axis).reshape(shape)]

        return _result("amax", [self], out, bw)

    # elementwise

    def exp(self):
        y = np.exp(self.data)
        return _result("exp", [self], y, lambda g: [g * y])

    def log(self, floor: Optional[float] = None):
        """Natural log. `floor` clamps the operand (and the backward
        denominator) away from zero for log-space probability work."""
        x = self.data
        if floor is None:
            floor = 0.0
        safe = np.maximum(x, floor) if floor else x
        with np.errstate(divide="ignore"):
            y = np.log(safe)
        return _result("log", [self], y, lambda g: [g / np.maximum(x, floor or _tiny(x.dtype))])

    def sqrt(self):
        y = np.sqrt(self.data)
        return _result("sqrt", [self], y,
                       lambda g: [g * 0.5 / np.maximum(y, _tiny(y.dtype))])

    def clip_min(self, c: float):
        """max(x, c) elementwise; subgradient 0 where the clamp is active."""
        x = self.data
        mask = x > c
        return _result("clip_min", [self], np.maximum(x, c),
                       lambda g: [g * mask])


def _tiny(dtype) -> float:
    return float(np.finfo(dtype).tiny)


def _as_float(v) -> float:
    return float(v)


def _constant_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.full_like(ref.data, float(value)))


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _result(name: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(_tracked(t) for t in inputs):
        out.node = OpNode(name, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _spread(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back over the reduced axes."""
    if axis is not None and not keepdims:
        for a in sorted(_norm_axes(axis, len(shape))):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_float(b)
        return _result("add", [a], a.data + c, lambda g: [g])
    out = a.data + b.data
    sa, sb = a.data.shape, b.data.shape
    return _result("add", [a, b], out,
                   lambda g: [_unbroadcast(g, sa), _unbroadcast(g, sb)])


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_float(b)
        return _result("mul", [a], a.data * c, lambda g: [g * c])
    out = a.data * b.data
    sa, sb = a.data.shape, b.data.shape
    da, db = a.data, b.data
    return _result("mul", [a, b], out,
                   lambda g: [_unbroadcast(g * db, sa), _unbroadcast(g * da, sb)])


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    sa, sb = a.data.shape, b.data.shape
    da, db = a.data, b.data
    return _result("div", [a, b], out,
                   lambda g: [_unbroadcast(g / db, sa),
                              _unbroadcast(-g * da / (db * db), sb)])


def custom_op(name: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    """Build a tensor from a hand-rolled op (forward value + backward closure).

    `backward_fn(g)` must return one gradient array (or None) per input,
    each exactly matching that input's shape.
    """
    return _result(name, inputs, data, backward_fn)


# activations


def relu(x: Tensor) -> Tensor:
    return x.clip_min(0.0)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    d = x.data
    mask = d > 0
    out = np.where(mask, d, slope * d)
    return _result("leaky_relu", [x], out,
                   lambda g: [g * np.where(mask, 1.0, slope)])


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _result("sigmoid", [x], y, lambda g: [g * y * (1.0 - y)])


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result("tanh", [x], y, lambda g: [g * (1.0 - y * y)])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    m = d.max(axis=axis, keepdims=True)
    e = np.exp(d - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return [y * (g - dot)]

    return _result("softmax", [x], y, bw)


def softmax_or_uniform(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax whose normalizer is order-invariant (sorted reduction) and
    which falls back to a uniform row when every entry underflows to
    -inf. Fallback rows receive zero gradient; each occurrence is logged.
    """
    d = x.data
    m = d.max(axis=axis, keepdims=True)
    bad = ~np.isfinite(m)  # all -inf (or nan) along the axis
    if bad.any():
        log.warning("softmax_or_uniform: %d underflowed rows replaced by uniform",
                    int(bad.sum()))
    with np.errstate(invalid="ignore"):
        e = np.exp(d - np.where(bad, 0.0, m))
    e = np.where(np.isfinite(e), e, 0.0)
    s = np.ascontiguousarray(np.sort(e, axis=axis)).sum(axis=axis, keepdims=True)
    k = d.shape[axis]
    y = np.where(bad, 1.0 / k, e / np.where(bad, 1.0, s))

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return [np.where(bad, 0.0, y * (g - dot))]

    return _result("softmax_or_uniform", [x], y, bw)


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    da, db = a.data, b.data
    return _result("matmul", [a, b], da @ db,
                   lambda g: [g @ db.T, da.T @ g])


def matmul_affine(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x @ w + b for x:[N,Din], w:[Din,Dout], b:[Dout]."""
    y = matmul(x, w)
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(f"affine bias shape {b.data.shape} != ({w.data.shape[1]},)")
        y = add(y, b)
    return y


# convolution and pooling


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor], stride: int = 1,
           pad: int = 0) -> Tensor:
    """Cross-correlation of x:[N,Cin,H,W] with kernel:[Cout,Cin,kh,kw].

    Output spatial extent: floor((H + 2*pad - kh) / stride) + 1.
    """
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    n, cin, h, w0 = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: kernel expects {kcin} input channels, input has {cin}")
    hp, wp = h + 2 * pad, w0 + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]            # [N,Cin,Ho,Wo,kh,kw]
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))  # [N,Cout,Ho,Wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    inputs = [x, kernel] + ([bias] if bias is not None else [])
    needs_x = _tracked(x)

    def bw(g):
        # kernel: correlate windows with the output gradient
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [Cout,Cin,kh,kw]
        gx = None
        if needs_x:
            gcol = np.tensordot(g, kernel.data, axes=([1], [0]))  # [N,Ho,Wo,Cin,kh,kw]
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            gcol = gcol.transpose(0, 3, 1, 2, 4, 5)               # [N,Cin,Ho,Wo,kh,kw]
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        gcol[:, :, :, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + w0] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result("conv2d", inputs, out, bw)


def maxpool2d(x: Tensor, window: int, stride: int, same: bool = False) -> Tensor:
    """Max pooling; `same` pads so the output keeps the input extent
    (stride 1 use). Padding values never win the max.

    The max is taken over shifted views rather than a materialized
    window tensor; the gradient routes to the first window position
    that attains the max (window scan order).
    """
    n, c, h, w0 = x.data.shape
    pad = window // 2 if same else 0
    lowest = np.finfo(x.data.dtype).min
    xp = (np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                 constant_values=lowest) if pad else x.data)
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - window) // stride + 1
    wo = (wp - window) // stride + 1

    def shifted(i, j):
        return xp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]

    out = shifted(0, 0).copy()
    for i in range(window):
        for j in range(window):
            if i or j:
                np.maximum(out, shifted(i, j), out=out)

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        claimed = np.zeros(out.shape, dtype=bool)
        for i in range(window):
            for j in range(window):
                take = (shifted(i, j) == out) & ~claimed
                if take.any():
                    gxp[:, :, i:i + ho * stride:stride,
                        j:j + wo * stride:stride] += np.where(take, g, 0.0)
                    claimed |= take
        return [gxp[:, :, pad:pad + h, pad:pad + w0] if pad else gxp]

    return _result("maxpool2d", [x], out, bw)


def gather2d(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """out[..., a, b] = x[..., rows[a], cols[b]]; duplicate indices are
    allowed (gradients accumulate), which also covers replication padding."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = x.data[..., rows[:, None], cols[None, :]]
    shape = x.data.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (..., rows[:, None], cols[None, :]), g)
        return [gx]

    return _result("gather2d", [x], out, bw)


def slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    """x[:, lo:hi] over the channel axis of an [N,C,...] tensor."""
    out = x.data[:, lo:hi]
    shape = x.data.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, lo:hi] = g
        return [gx]

    return _result("slice_channels", [x], out, bw)


def take_per_row(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[n] = x[n, idx[n]] for x:[N,K,...]; one selection per sample."""
    idx = np.asarray(idx, dtype=np.intp)
    n = x.data.shape[0]
    ar = np.arange(n)
    out = x.data[ar, idx]
    shape = x.data.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[ar, idx] = g
        return [gx]

    return _result("take_per_row", [x], out, bw)


# backward driver


def backward(loss: Tensor) -> None:
    """Populate grads of every tensor reachable from `loss`.

    The loss must be a scalar produced through recorded ops. Nodes are
    replayed in exact reverse order of forward construction, so each
    node's output gradient is complete before the node runs.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward target must be scalar, got shape {loss.data.shape}")
    if loss.node is None:
        raise GraphError("tensor is not attached to the op graph")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        order.append(t)
        stack.extend(t.node.inputs)
    order.sort(key=lambda t: t.node.seq, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for t in order:
        g = t.grad
        if g is None:
            continue
        grads = t.node.backward_fn(g)
        for inp, gi in zip(t.node.inputs, grads):
            if gi is None or not _tracked(inp):
                continue
            if gi.shape != inp.data.shape:
                raise ShapeError(
                    f"{t.node.name}: backward produced shape {gi.shape} "
                    f"for input of shape {inp.data.shape}")
            if inp.grad is None:
                inp.grad = gi.astype(inp.data.dtype, copy=True)
            else:
                inp.grad += gi
