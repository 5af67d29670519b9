"""Naive loop implementations of the convolution and pooling ops.

They cross-check the vectorized ops in
:mod:`fpvt_tensor.functional` and take and return plain numpy arrays.
"""

from typing import Optional

import numpy as np


def conv2d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: Optional[np.ndarray] = None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    batch, channels, height, width = x.shape
    out_channels, _, kernel, _ = weight.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (height + 2 * padding - kernel) // stride + 1
    out_w = (width + 2 * padding - kernel) // stride + 1
    out = np.zeros((batch, out_channels, out_h, out_w), dtype=x.dtype)
    for b in range(batch):
        for p in range(out_channels):
            for i in range(out_h):
                for j in range(out_w):
                    patch = padded[b, :, i * stride:i * stride + kernel, j * stride:j * stride + kernel]
                    out[b, p, i, j] = np.sum(patch * weight[p])
            if bias is not None:
                out[b, p] += bias[p]
    return out


def depthwise_conv2d(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    batch, channels, height, width = x.shape
    kernel = weight.shape[1]
    padding = (kernel - 1) // 2
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros_like(x)
    for b in range(batch):
        for c in range(channels):
            for i in range(height):
                for j in range(width):
                    out[b, c, i, j] = np.sum(padded[b, c, i:i + kernel, j:j + kernel] * weight[c])
            if bias is not None:
                out[b, c] += bias[c]
    return out


def pointwise_conv(x: np.ndarray, mix: np.ndarray) -> np.ndarray:
    batch, _, height, width = x.shape
    out = np.zeros((batch, mix.shape[0], height, width), dtype=x.dtype)
    for b in range(batch):
        for i in range(height):
            for j in range(width):
                out[b, :, i, j] = mix @ x[b, :, i, j]
    return out


def adaptive_max_pool2d(x: np.ndarray, out_size: int) -> np.ndarray:
    batch, channels, height, width = x.shape
    out = np.zeros((batch, channels, out_size, out_size), dtype=x.dtype)
    for i in range(out_size):
        h0, h1 = (i * height) // out_size, ((i + 1) * height) // out_size
        for j in range(out_size):
            w0, w1 = (j * width) // out_size, ((j + 1) * width) // out_size
            for b in range(batch):
                for c in range(channels):
                    out[b, c, i, j] = x[b, c, h0:h1, w0:w1].max()
    return out
