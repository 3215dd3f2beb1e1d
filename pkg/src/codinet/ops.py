"""Differentiable operators used by blocks, routers and losses.

Image tensors are ``(C, H, W)`` or batched ``(N, C, H, W)``; vector
operators act on the last axis so they work per sample or per batch.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from codinet.tensor import DimensionError, Tensor


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b`` for 2-d operands (``a`` may be 1-d)."""
    a, b = Tensor.ensure(a), Tensor.ensure(b)
    if a.ndim not in (1, 2) or b.ndim != 2:
        raise DimensionError(f"matmul expects 1/2-d @ 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        if x.ndim == 1:
            return g @ y.T, np.outer(x, g)
        return g @ y.T, x.T @ g

    return Tensor._make(x @ y, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight columns {weight.shape[1]}")
    out = matmul(x, weight.T)
    if bias is not None:
        out = out + bias
    return out


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """``(N, C, H+2, W+2)`` padded input -> ``(N, C*9, H*W)`` patch matrix."""
    n, c = xp.shape[:2]
    windows = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * 9, h * w)


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def _conv_raw(xd: np.ndarray, wmat: np.ndarray) -> tuple:
    n, c_in, h, w = xd.shape
    cols = _im2col(_pad1(xd), h, w)
    return np.matmul(wmat, cols).reshape(n, -1, h, w), cols


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1.

    Args:
        x: ``(C_in, H, W)`` or ``(N, C_in, H, W)``.
        kernel: ``(C_out, C_in, 3, 3)``.
        bias: optional ``(C_out,)``.
    """
    x, kernel = Tensor.ensure(x), Tensor.ensure(kernel)
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d kernel must be (C_out, C_in, 3, 3), got {kernel.shape}")
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be 3-d or 4-d, got {x.shape}")
    xd = x.data[None] if single else x.data
    n, c_in, h, w = xd.shape
    c_out = kernel.shape[0]
    if kernel.shape[1] != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {c_in}, kernel {kernel.shape[1]}")
    wmat = kernel.data.reshape(c_out, c_in * 9)
    out, cols = _conv_raw(xd, wmat)
    if single:
        out = out[0]

    def backward(g):
        gd = g[None] if single else g
        gm = gd.reshape(n, c_out, h * w)
        gk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        dx = None
        if x.requires_grad:
            # input gradient = same-padded correlation with the flipped, channel-swapped kernel
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, c_out * 9)
            dx, _ = _conv_raw(gd, flipped)
            if single:
                dx = dx[0]
        return dx, gk

    result = Tensor._make(out, (x, kernel), backward, "conv2d")
    if bias is not None:
        result = result + bias.reshape(c_out, 1, 1)
    return result


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0."""
    x = Tensor.ensure(x)
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: ``(C,H,W) -> (C,)``, ``(N,C,H,W) -> (N,C)``."""
    x = Tensor.ensure(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool expects 3-d or 4-d input, got {x.shape}")
    h, w = x.shape[-2:]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), shape).copy(),)

    return Tensor._make(x.data.mean(axis=(-2, -1)), (x,), backward, "gap")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` average pooling (downsampling stage)."""
    x = Tensor.ensure(x)
    *lead, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {size}")
    blocks = x.data.reshape(*lead, h // size, size, w // size, size)
    out = blocks.mean(axis=(-3, -1))
    shape = x.shape

    def backward(g):
        up = np.repeat(np.repeat(g, size, axis=-2), size, axis=-1) / (size * size)
        return (up.reshape(shape),)

    return Tensor._make(out, (x,), backward, "avg_pool2d")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = Tensor.ensure(logits)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (logits,), backward, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = Tensor.ensure(logits)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (logits,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is ``(k,)`` with an integer label, or ``(N, k)`` with ``N`` labels.
    """
    logits = Tensor.ensure(logits)
    k = logits.shape[-1]
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if np.any(lab < 0) or np.any(lab >= k):
        raise ValueError(f"label out of range [0, {k}): {lab}")
    lp = log_softmax(logits)
    if logits.ndim == 1:
        if lab.size != 1:
            raise ValueError("a single logit vector takes exactly one label")
        return -lp[int(lab[0])]
    if lab.shape[0] != logits.shape[0]:
        raise DimensionError(f"{lab.shape[0]} labels for {logits.shape[0]} logit rows")
    picked = lp[np.arange(lab.shape[0]), lab]
    return -picked.mean()


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; gradient at the origin is taken as 0."""
    x = Tensor.ensure(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis))

    def backward(g):
        n = np.expand_dims(norm, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, x.data / safe, 0.0) * np.expand_dims(g, axis),)

    return Tensor._make(norm, (x,), backward, "l2_norm")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor.ensure(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tuple(tensors), backward, "stack")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select batch rows ``x[index]`` (index along the first axis)."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._make(x.data[index], (x,), backward, "take_rows")


def scatter_rows(base: Tensor, index: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``index`` replaced by ``values`` (unique indices)."""
    index = np.asarray(index, dtype=np.int64)
    out = base.data.copy()
    out[index] = values.data

    def backward(g):
        gb = g.copy()
        gb[index] = 0.0
        return gb, g[index]

    return Tensor._make(out, (base, values), backward, "scatter_rows")


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient passed to ``soft`` unchanged."""
    value = np.asarray(hard, dtype=soft.dtype)
    return Tensor._make(value, (soft,), lambda g: (g,), "straight_through")
