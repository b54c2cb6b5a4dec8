"""Tensor kernels on (channels, height, width) float32 arrays."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from ..imgcore import GrayImage

LEAKY_SLOPE = 0.1


def image_to_tensor(image: GrayImage, size=None) -> np.ndarray:
    """Replicate a gray image into three channels scaled to [0, 1]."""
    if size is not None and (image.width, image.height) != (size, size):
        raise ShapeError(f"expected a {size}x{size} image, got {image.width}x{image.height}")
    plane = image.pixels.astype(np.float32) / np.float32(255.0)
    return np.ascontiguousarray(np.broadcast_to(plane, (3,) + plane.shape))


def activate(x, kind: str):
    if kind == "linear":
        return x
    if kind == "leaky":
        return np.where(x > 0, x, x * np.asarray(LEAKY_SLOPE, dtype=np.asarray(x).dtype))
    if kind == "relu":
        return np.maximum(x, 0)
    raise ValueError(f"unknown activation {kind!r}")


def im2col(x: np.ndarray, k: int, stride: int, pad: int, pad_value=0):
    """Unfold ``x`` into a (c*k*k, out_h*out_w) patch matrix."""
    c, h, w = x.shape
    if k == 1 and stride == 1 and pad == 0:
        return x.reshape(c, h * w), h, w
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), constant_values=pad_value)
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = win.shape[1:3]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, oh * ow)
    return cols, oh, ow


def conv2d(x, weights, bias=None, stride=1, pad=0, activation="linear"):
    """Cross-correlation of ``x`` (c, h, w) with ``weights`` (o, c, k, k)."""
    o, c, k, k2 = weights.shape
    if k != k2:
        raise ShapeError(f"non-square kernel {weights.shape}")
    if x.shape[0] != c:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {c}")
    cols, oh, ow = im2col(x, k, stride, pad)
    out = weights.reshape(o, c * k * k).astype(x.dtype, copy=False) @ cols
    if bias is not None:
        out += np.asarray(bias, dtype=out.dtype)[:, None]
    return activate(out.reshape(o, oh, ow), activation)


def maxpool2d(x, size, stride, padding=None):
    """Max pooling with Darknet's padding rule.

    ``padding`` (default ``size - 1``) is split with the smaller half before
    the data. Out-of-range samples replicate the edge, which for a maximum is
    the same as ignoring them.
    """
    if padding is None:
        padding = size - 1
    c, h, w = x.shape
    oh = (h + padding - size) // stride + 1
    ow = (w + padding - size) // stride + 1
    before = padding // 2
    after = padding - before
    if padding:
        x = np.pad(x, ((0, 0), (before, after), (before, after)), mode="edge")
    out = None
    for dy in range(size):
        for dx in range(size):
            s = x[:, dy:dy + stride * (oh - 1) + 1:stride, dx:dx + stride * (ow - 1) + 1:stride]
            out = s.copy() if out is None else np.maximum(out, s, out=out)
    return out


def upsample2x(x, stride=2):
    return x.repeat(stride, axis=1).repeat(stride, axis=2)


def route_concat(inputs):
    inputs = list(inputs)
    dims = {t.shape[1:] for t in inputs}
    if len(dims) != 1:
        raise ShapeError(f"cannot concatenate tensors with spatial dims {sorted(dims)}")
    if len(inputs) == 1:
        return inputs[0]
    return np.concatenate(inputs, axis=0)
