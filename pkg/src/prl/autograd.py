"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built eagerly: each op returns a new :class:`Tensor` that
remembers its parents and a closure routing the output gradient back to
them.  The op set is exactly what the bundled networks need (affine layers,
2-d convolution, normalization, pointwise nonlinearities and a clamped
binary cross-entropy); there is no broadcasting beyond what those layers
require.

Gradients accumulate into ``Tensor.grad`` until the owner clears them, so a
weight used at several points of an unrolled network receives the sum of
all its contributions.  Wrap inference-only code in :func:`no_grad` to skip
graph recording entirely.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "BatchSizeError",
    "no_grad",
    "add",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "reshape",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "linear",
    "layer_norm",
    "batch_norm",
    "conv2d",
    "bce_loss",
    "backward",
]

LOSS_CLAMP = 1e-7
LAYER_NORM_EPS = 1e-5
BATCH_NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class BatchSizeError(ValueError):
    """Batch too small for train-mode statistics."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._prev: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out: Tensor, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._grad_fn = grad_fn
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Leaf gradients accumulate across calls; intermediate node gradients are
    reset here so repeated backward passes over the same graph double the
    leaves exactly.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        if node._prev:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)

    def grad_fn(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)

    def grad_fn(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(out, (a, b), grad_fn)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c)

    def grad_fn(g):
        _accum(x, g * c)

    return _record(out, (x,), grad_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))

    def grad_fn(g):
        _accum(x, g * mask)

    return _record(out, (x,), grad_fn)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # Split by sign so exp never overflows.
    d = x.data
    y = np.where(d >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(y)

    def grad_fn(g):
        _accum(x, g * y * (1.0 - y))

    return _record(out, (x,), grad_fn)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape
    out = Tensor(x.data.reshape(shape))

    def grad_fn(g):
        _accum(x, g.reshape(old))

    return _record(out, (x,), grad_fn)


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(p) for p in parts]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _record(out, tuple(tensors), grad_fn)


def reduce_sum(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum())

    def grad_fn(g):
        _accum(x, np.full_like(x.data, float(g)))

    return _record(out, (x,), grad_fn)


def reduce_mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    out = Tensor(x.data.mean())

    def grad_fn(g):
        _accum(x, np.full_like(x.data, float(g) / n))

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# layers


def linear(x, weight, bias) -> Tensor:
    """Affine map: x[B,In] @ weight[In,Out] + bias[Out]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(
            f"linear expects 2-d input and weight, got {x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"linear inner dimensions differ: input {x.data.shape} vs weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(
            f"linear bias shape {bias.data.shape} does not match weight {weight.data.shape}")
    out = Tensor(x.data @ weight.data + bias.data)

    def grad_fn(g):
        _accum(x, g @ weight.data.T)
        _accum(weight, x.data.T @ g)
        _accum(bias, g.sum(axis=0))

    return _record(out, (x, weight, bias), grad_fn)


def layer_norm(x, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Row-wise normalization to mean 0 / population std 1, no learned affine.

    The denominator is max(std, eps) rather than std + eps: the guard only
    engages for near-constant rows, so the output is exactly invariant to
    shifting and positive rescaling of the input and each row keeps the
    tight sum-of-squares bound (|element| <= sqrt(n)).
    """
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] < 1:
        raise ShapeError(f"layer_norm expects a non-empty 2-d input, got {x.data.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    # For an exactly constant row the mean IS the common value; clear the
    # float-rounding residue so such rows normalize to exact zeros.
    constant = (x.data.max(axis=1, keepdims=True) == x.data.min(axis=1, keepdims=True))
    if constant.any():
        centered = np.where(constant, 0.0, centered)
    std = np.sqrt((centered * centered).mean(axis=1, keepdims=True))
    denom = np.maximum(std, eps)
    y = centered / denom
    out = Tensor(y)

    def grad_fn(g):
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        active = std > eps
        gx = (g - gm - np.where(active, y * gym, 0.0)) / denom
        _accum(x, gx)

    return _record(out, (x,), grad_fn)


def batch_norm(x, gain, bias, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1,
               eps: float = BATCH_NORM_EPS) -> Tensor:
    """Per-channel batch normalization over a B,C,H,W tensor.

    Train mode normalizes with batch statistics (population variance) and
    updates ``running_mean``/``running_var`` in place with the given
    momentum; eval mode uses the running statistics unchanged.  The learned
    per-channel ``gain`` and ``bias`` always apply.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects a 4-d input, got {x.data.shape}")
    channels = x.data.shape[1]
    if gain.data.shape != (channels,) or bias.data.shape != (channels,):
        raise ShapeError(
            f"batch_norm gain/bias shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match {channels} channels")

    axes = (0, 2, 3)
    if training:
        if x.data.shape[0] < 2:
            raise BatchSizeError(
                f"batch_norm in train mode needs a batch of at least 2, got {x.data.shape[0]}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var

    inv = 1.0 / np.sqrt(var + eps)
    bshape = (1, channels, 1, 1)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = Tensor(gain.data.reshape(bshape) * xhat + bias.data.reshape(bshape))

    def grad_fn(g):
        _accum(gain, (g * xhat).sum(axis=axes))
        _accum(bias, g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gain.data.reshape(bshape)
        if training:
            m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = inv.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv.reshape(bshape)
        _accum(x, gx)

    return _record(out, (x, gain, bias), grad_fn)


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation: x[B,Cin,H,W] * weight[Cout,Cin,K,K] + bias."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and weight, got {x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.data.shape} vs weight {weight.data.shape}")
    cout, _, kh, kw = weight.data.shape
    if kh != kw:
        raise ShapeError(f"conv2d needs a square kernel, got {weight.data.shape}")
    if bias.data.shape != (cout,):
        raise ShapeError(
            f"conv2d bias shape {bias.data.shape} does not match weight {weight.data.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")

    b, cin, h, w = x.data.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    if hp < kh or wp < kw or out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d kernel {weight.data.shape} larger than padded input "
            f"({b}, {cin}, {hp}, {wp})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    out = np.einsum("bcijkl,ockl->boij", windows, weight.data, optimize=True)
    out += bias.data.reshape(1, cout, 1, 1)
    result = Tensor(out)

    def grad_fn(g):
        _accum(bias, g.sum(axis=(0, 2, 3)))
        _accum(weight, np.einsum("boij,bcijkl->ockl", g, windows, optimize=True))
        if not x.requires_grad:
            return
        gxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                patch = np.einsum("boij,oc->bcij", g, weight.data[:, :, ki, kj], optimize=True)
                gxp[:, :, ki:ki + stride * out_h:stride,
                    kj:kj + stride * out_w:stride] += patch
        if padding:
            gxp = gxp[:, :, padding:padding + h, padding:padding + w]
        _accum(x, gxp)

    return _record(result, (x, weight, bias), grad_fn)


def bce_loss(prediction, target, weight_mask=None) -> Tensor:
    """Mean binary cross-entropy with predictions clamped away from {0, 1}.

    ``target`` must contain only 0s and 1s.  ``weight_mask``, when given,
    scales each element's contribution before the mean.  The clamp has zero
    gradient outside the open interval, matching the flat loss there.
    """
    prediction = _as_tensor(prediction)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != prediction.data.shape:
        raise ShapeError(f"bce_loss shapes differ: prediction {prediction.data.shape} "
                         f"vs target {t.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce_loss target must contain only 0 and 1")
    w = None
    if weight_mask is not None:
        w = weight_mask.data if isinstance(weight_mask, Tensor) else np.asarray(
            weight_mask, dtype=np.float64)
        if w.shape != prediction.data.shape:
            raise ShapeError(f"bce_loss weight_mask shape {w.shape} does not match "
                             f"prediction {prediction.data.shape}")

    lo, hi = LOSS_CLAMP, 1.0 - LOSS_CLAMP
    p = np.clip(prediction.data, lo, hi)
    elem = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    if w is not None:
        elem = elem * w
    n = elem.size
    out = Tensor(elem.mean())

    def grad_fn(g):
        inside = (prediction.data > lo) & (prediction.data < hi)
        gp = (p - t) / (p * (1.0 - p)) / n
        if w is not None:
            gp = gp * w
        _accum(prediction, float(g) * np.where(inside, gp, 0.0))

    return _record(out, (prediction,), grad_fn)
