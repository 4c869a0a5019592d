"""Dense NCHW layer primitives with hand-written backward passes.

Every tensor is a plain ``numpy.ndarray`` of shape (batch, channels, height,
width). Forward functions are pure; backward functions take whatever the
forward needed (input, weights, argmax map) plus the upstream gradient and
return gradients in the same order as the forward arguments.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _check4(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


def _im2col3(x: np.ndarray) -> np.ndarray:
    # (C*9, N*H*W) matrix of zero-padded 3x3 neighbourhoods
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, n, h, w), dtype=x.dtype)
    for u in range(3):
        for v in range(3):
            cols[:, u, v] = xp[:, :, u:u + h, v:v + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * 9, n * h * w)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved).

    ``w`` has shape (out_channels, in_channels, 3, 3) and is applied as a
    cross-correlation: ``out[n,o,i,j] = b[o] + sum x[n,c,i+u-1,j+v-1] * w[o,c,u,v]``.
    """
    _check4(x)
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv kernel must be (O, C, 3, 3), got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    n, _, h, wd = x.shape
    o = w.shape[0]
    y = w.reshape(o, -1) @ _im2col3(x)
    y = y.reshape(o, n, h, wd).transpose(1, 0, 2, 3)
    if b is not None:
        y = y + b.reshape(1, o, 1, 1)
    return np.ascontiguousarray(y)


def conv2d_backward(x: np.ndarray, w: np.ndarray, upstream: np.ndarray):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`conv2d_forward`."""
    _check4(upstream, "upstream")
    n, c, h, wd = x.shape
    o = w.shape[0]
    if upstream.shape != (n, o, h, wd):
        raise ShapeError(f"upstream shape {upstream.shape} does not match output {(n, o, h, wd)}")
    up = upstream.transpose(1, 0, 2, 3).reshape(o, -1)
    grad_w = (up @ _im2col3(x).T).reshape(w.shape)
    grad_b = upstream.sum(axis=(0, 2, 3))
    # gradient w.r.t. input is a same-padded conv with the flipped, channel-swapped kernel
    w_adj = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = conv2d_forward(upstream, w_adj)
    return grad_x, grad_w, grad_b


def pointwise_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """1x1 convolution; ``w`` is (out_channels, in_channels)."""
    _check4(x)
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise kernel {w.shape} incompatible with input {x.shape}")
    y = np.einsum("oc,nchw->nohw", w, x)
    if b is not None:
        y = y + b.reshape(1, -1, 1, 1)
    return y


def pointwise_backward(x: np.ndarray, w: np.ndarray, upstream: np.ndarray):
    grad_x = np.einsum("oc,nohw->nchw", w, upstream)
    grad_w = np.einsum("nohw,nchw->oc", upstream, x)
    grad_b = upstream.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


def maxpool2_forward(x: np.ndarray):
    """2x2 max pooling with stride 2.

    Returns the pooled tensor and an ``argmax`` map holding, per window, the
    flat index 0..3 of the winner in row-major window order. Ties resolve to
    the first (top-left) occurrence.
    """
    _check4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    argmax = win.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(win, argmax[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, argmax


def maxpool2_backward(argmax: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if argmax.shape != upstream.shape:
        raise ShapeError(f"argmax {argmax.shape} and upstream {upstream.shape} differ")
    n, c, h2, w2 = upstream.shape
    win = np.zeros((n, c, h2, w2, 4), dtype=upstream.dtype)
    np.put_along_axis(win, argmax[..., None].astype(np.intp), upstream[..., None], axis=-1)
    return win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


def convtrans2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Transposed convolution with a 2x2 kernel and stride 2.

    ``w`` has shape (in_channels, out_channels, 2, 2). Each input pixel
    scatters ``value * kernel`` into its own 2x2 output block, so the output
    is exactly twice the input size with no overlap.
    """
    _check4(x)
    if w.ndim != 4 or w.shape[2:] != (2, 2) or w.shape[0] != x.shape[1]:
        raise ShapeError(f"transposed kernel {w.shape} incompatible with input {x.shape}")
    n, _, h, wd = x.shape
    o = w.shape[1]
    y = np.tensordot(x, w, axes=([1], [0]))  # (n, h, w, o, 2, 2)
    y = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd)
    if b is not None:
        y = y + b.reshape(1, o, 1, 1)
    return np.ascontiguousarray(y)


def convtrans2_backward(x: np.ndarray, w: np.ndarray, upstream: np.ndarray):
    """Return ``(grad_x, grad_w, grad_b)`` for :func:`convtrans2_forward`."""
    n, c, h, wd = x.shape
    o = w.shape[1]
    if upstream.shape != (n, o, 2 * h, 2 * wd):
        raise ShapeError(f"upstream shape {upstream.shape} does not match output {(n, o, 2 * h, 2 * wd)}")
    up = upstream.reshape(n, o, h, 2, wd, 2)
    grad_x = np.tensordot(up, w, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    grad_w = np.tensordot(x, up, axes=([0, 2, 3], [0, 2, 4]))  # (c, o, 2, 2)
    grad_b = upstream.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so large |x| never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def sigmoid_backward(y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * y * (1 - y)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check4(a, "a")
    _check4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def split_channels(upstream: np.ndarray, a_channels: int):
    """Backward of :func:`concat_channels`: split a gradient into its two parts."""
    return upstream[:, :a_channels], upstream[:, a_channels:]
