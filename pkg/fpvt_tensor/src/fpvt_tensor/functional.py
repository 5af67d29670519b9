"""Differentiable neural-network operators built on :mod:`fpvt_tensor.tensor`.

Convolutions lower to an explicit im2col matrix product; naive loop versions
of the same ops live in :mod:`fpvt_tensor.reference` for oracle testing.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DataError, ShapeError
from .tensor import Tensor, apply_op, as_tensor, unbroadcast

logger = logging.getLogger(__name__)

NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _require_ndim(op: str, name: str, tensor: Tensor, ndim: int) -> None:
    if tensor.ndim != ndim:
        raise ShapeError(f"{op}: {name} must be {ndim}-D, got shape {tensor.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes.

    Args:
        a: Tensor[..., M, K]
        b: Tensor[..., K, N]

    Returns:
        Tensor[..., M, N]

    Raises:
        ShapeError: If the inner dimensions disagree (message names both shapes)
    """
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} and {b.shape}: {e}") from e

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return apply_op("matmul", (a, b), data, backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias with weight laid out (in_features, out_features)."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return apply_op("softmax_rows", (x,), probs, backward_fn)


def log_softmax(x: Tensor) -> Tensor:
    """Log of softmax over the last axis, computed without forming the softmax first."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return apply_op("log_softmax", (x,), out, backward_fn)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    Args:
        logits: Tensor[B x M]
        targets: B class indices in [0, M)

    Raises:
        DataError: If a target is out of range
    """
    _require_ndim("cross_entropy", "logits", logits, 2)
    targets = np.asarray(targets, dtype=np.int64)
    batch, classes = logits.shape
    if targets.shape != (batch,):
        raise ShapeError(f"cross_entropy: expected {batch} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise DataError(f"cross_entropy: targets must lie in [0, {classes}), got {targets.tolist()}")
    logp = log_softmax(logits)
    picked = logp[np.arange(batch), targets]
    return -picked.mean()


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of x * Phi(x); agrees with the erf form to within 1e-3."""
    inner = _GELU_C * (x.data + _GELU_A * x.data**3)
    out = 0.5 * x.data * (1.0 + np.tanh(inner))

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * _gelu_derivative(x.data),)

    return apply_op("gelu", (x,), out, backward_fn)


def _gelu_derivative(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def gelu_exact(x: np.ndarray) -> np.ndarray:
    """Reference erf form of GELU, used to bound the tanh approximation."""
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale x to unit L2 norm along an axis."""
    return x / ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise DataError(f"dropout probability must be below 1, got {p}")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return apply_op("dropout", (x,), x.data * mask, lambda g: (g * mask,))


def _conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(padded: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Gather K x K windows of a padded B x C x H x W array into (B*H'*W', C*K*K) rows."""
    batch, channels = padded.shape[:2]
    windows = sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, channels * kernel * kernel)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: Tensor[B x C x H x W]
        weight: Tensor[P x C x K x K]
        bias: Optional Tensor[P]
        stride: Step between windows
        padding: Zeros added on every side

    Returns:
        Tensor[B x P x H' x W'] with H' = floor((H + 2*padding - K) / stride) + 1

    Raises:
        ShapeError: If the kernel is larger than the padded input or channels disagree
    """
    _require_ndim("conv2d", "input", x, 4)
    _require_ndim("conv2d", "weight", weight, 4)
    batch, channels, height, width = x.shape
    out_channels, weight_channels, kernel, kernel_w = weight.shape
    if weight_channels != channels:
        raise ShapeError(f"conv2d: weight {weight.shape} expects {weight_channels} channels, input {x.shape} has {channels}")
    if kernel != kernel_w:
        raise ShapeError(f"conv2d: only square kernels are supported, got {weight.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    if kernel > height + 2 * padding or kernel > width + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kernel}x{kernel} is larger than padded input "
            f"{height + 2 * padding}x{width + 2 * padding}"
        )
    out_h = _conv_output_size(height, kernel, stride, padding)
    out_w = _conv_output_size(width, kernel, stride, padding)
    pad_spec = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    padded = np.pad(x.data, pad_spec)
    cols = im2col(padded, kernel, stride, out_h, out_w)
    wmat = weight.data.reshape(out_channels, -1)
    out = (cols @ wmat.T).reshape(batch, out_h, out_w, out_channels).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs: List[Tensor] = [x, weight] + ([bias] if bias is not None else [])

    def backward_fn(g: np.ndarray) -> List[np.ndarray]:
        g_rows = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_w = (g_rows.T @ cols).reshape(weight.shape)
        grad_cols = (g_rows @ wmat).reshape(batch, out_h, out_w, channels, kernel, kernel)
        grad_padded = np.zeros_like(padded)
        h_stop = stride * (out_h - 1) + 1
        w_stop = stride * (out_w - 1) + 1
        for i in range(kernel):
            for j in range(kernel):
                grad_padded[:, :, i:i + h_stop:stride, j:j + w_stop:stride] += (
                    grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        grads = [grad_padded[:, :, padding:padding + height, padding:padding + width], grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return apply_op("conv2d", inputs, np.ascontiguousarray(out), backward_fn)


def depthwise_conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    padding: Optional[int] = None,
) -> Tensor:
    """Convolve each channel with its own K x K filter, preserving the spatial size.

    Args:
        x: Tensor[B x C x H x W]
        weight: Tensor[C x K x K], one filter per channel
        bias: Optional Tensor[C]
        padding: Must equal (K - 1) / 2; defaults to it

    Raises:
        ShapeError: If K is even, padding does not preserve size, or channels disagree
    """
    _require_ndim("depthwise_conv2d", "input", x, 4)
    _require_ndim("depthwise_conv2d", "weight", weight, 3)
    batch, channels, height, width = x.shape
    if weight.shape[0] != channels:
        raise ShapeError(f"depthwise_conv2d: weight {weight.shape} does not match {channels} input channels")
    kernel = weight.shape[1]
    if weight.shape[2] != kernel:
        raise ShapeError(f"depthwise_conv2d: only square kernels are supported, got {weight.shape}")
    if kernel % 2 == 0:
        raise ShapeError(f"depthwise_conv2d: kernel size {kernel} is even, padding cannot preserve the grid")
    same = (kernel - 1) // 2
    if padding is None:
        padding = same
    if padding != same:
        raise ShapeError(f"depthwise_conv2d: padding must be {same} for kernel {kernel}, got {padding}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros_like(x.data)
    for i in range(kernel):
        for j in range(kernel):
            out += padded[:, :, i:i + height, j:j + width] * weight.data[:, i, j][None, :, None, None]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs: List[Tensor] = [x, weight] + ([bias] if bias is not None else [])

    def backward_fn(g: np.ndarray) -> List[np.ndarray]:
        grad_padded = np.zeros_like(padded)
        grad_w = np.zeros_like(weight.data)
        for i in range(kernel):
            for j in range(kernel):
                grad_w[:, i, j] = (g * padded[:, :, i:i + height, j:j + width]).sum(axis=(0, 2, 3))
                grad_padded[:, :, i:i + height, j:j + width] += g * weight.data[:, i, j][None, :, None, None]
        grads = [grad_padded[:, :, padding:padding + height, padding:padding + width], grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return apply_op("depthwise_conv2d", inputs, out, backward_fn)


def pointwise_conv(x: Tensor, mix: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Mix channels with 1 x 1 filters: out[:, p] = sum_q mix[p, q] * x[:, q].

    Args:
        x: Tensor[B x C_in x H x W]
        mix: Tensor[C_out x C_in]
        bias: Optional Tensor[C_out]

    Raises:
        ShapeError: If mix does not match the input channel count
    """
    _require_ndim("pointwise_conv", "input", x, 4)
    _require_ndim("pointwise_conv", "mix", mix, 2)
    if mix.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise_conv: mix {mix.shape} does not match {x.shape[1]} input channels")
    out = np.einsum("oc,bchw->bohw", mix.data, x.data)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs: List[Tensor] = [x, mix] + ([bias] if bias is not None else [])

    def backward_fn(g: np.ndarray) -> List[np.ndarray]:
        grads = [
            np.einsum("oc,bohw->bchw", mix.data, g),
            np.einsum("bohw,bchw->oc", g, x.data),
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return apply_op("pointwise_conv", inputs, out, backward_fn)


def adaptive_windows(size: int, out_size: int) -> List[Tuple[int, int]]:
    """Half-open [floor(i*size/out), floor((i+1)*size/out)) windows along one axis."""
    return [((i * size) // out_size, ((i + 1) * size) // out_size) for i in range(out_size)]


def adaptive_max_pool2d(x: Tensor, out_size: int) -> Tensor:
    """Max over adaptive windows; gradient goes to the first row-major argmax.

    Args:
        x: Tensor[B x C x H x W]
        out_size: Side of the square output

    Raises:
        ShapeError: If out_size exceeds H or W
    """
    _require_ndim("adaptive_max_pool2d", "input", x, 4)
    batch, channels, height, width = x.shape
    if out_size < 1 or out_size > height or out_size > width:
        raise ShapeError(f"adaptive_max_pool2d: output size {out_size} does not fit input {height}x{width}")
    out = np.empty((batch, channels, out_size, out_size), dtype=x.dtype)
    rows = np.empty(out.shape, dtype=np.int64)
    cols = np.empty(out.shape, dtype=np.int64)
    for i, (h0, h1) in enumerate(adaptive_windows(height, out_size)):
        for j, (w0, w1) in enumerate(adaptive_windows(width, out_size)):
            window = x.data[:, :, h0:h1, w0:w1].reshape(batch, channels, -1)
            arg = window.argmax(axis=-1)
            out[:, :, i, j] = np.take_along_axis(window, arg[..., None], axis=-1)[..., 0]
            rows[:, :, i, j] = h0 + arg // (w1 - w0)
            cols[:, :, i, j] = w0 + arg % (w1 - w0)
    b_idx, c_idx, _, _ = np.indices(out.shape)

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        np.add.at(grad, (b_idx, c_idx, rows, cols), g)
        return (grad,)

    return apply_op("adaptive_max_pool2d", (x,), out, backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize each token over its last (channel) axis, then apply gain and bias."""
    channels = x.shape[-1]
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match {channels} channels")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_hat = g * gain.data
        grad_x = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - xhat * (g_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return (
            grad_x,
            (g * xhat).reshape(-1, channels).sum(axis=0),
            g.reshape(-1, channels).sum(axis=0),
        )

    return apply_op("layer_norm", (x, gain, bias), out, backward_fn)


@dataclass
class BatchNormState:
    """Running statistics of a batch-norm layer; mutated only by training-mode forwards."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = NORM_EPS
    num_batches_tracked: int = 0

    @classmethod
    def create(cls, channels: int, dtype: np.dtype, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
        )


def batch_norm(
    x: Tensor,
    state: BatchNormState,
    gain: Tensor,
    bias: Tensor,
    training: bool,
) -> Tensor:
    """Per-channel normalization of a B x C x H x W map.

    Training uses batch statistics and updates the running ones with an
    exponential average (unbiased variance); inference uses the running ones.

    Raises:
        DataError: If training statistics would be computed from a single value
    """
    _require_ndim("batch_norm", "input", x, 4)
    batch, channels, height, width = x.shape
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise ShapeError(f"batch_norm: gain {gain.shape} / bias {bias.shape} do not match {channels} channels")
    axes = (0, 2, 3)
    count = batch * height * width
    if training:
        if count < 2:
            raise DataError("batch_norm: training needs at least 2 values per channel, got 1")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean[:] = (1.0 - m) * state.running_mean + m * mean
        state.running_var[:] = (1.0 - m) * state.running_var + m * var * count / (count - 1)
        state.num_batches_tracked += 1
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)[None, :, None, None]
    xhat = (x.data - mean.astype(x.dtype)[None, :, None, None]) * inv_std
    out = xhat * gain.data[None, :, None, None] + bias.data[None, :, None, None]

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_hat = g * gain.data[None, :, None, None]
        if training:
            grad_x = (inv_std / count) * (
                count * g_hat
                - g_hat.sum(axis=axes, keepdims=True)
                - xhat * (g_hat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = g_hat * inv_std
        return grad_x, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return apply_op("batch_norm", (x, gain, bias), out, backward_fn)


def interpolation_matrix(n_in: int, n_out: int, dtype: np.dtype = np.dtype(np.float64)) -> np.ndarray:
    """Bilinear (align-corners) weights mapping n_in samples onto n_out samples.

    Row i holds the weights of output sample i; the first and last samples map
    exactly onto the first and last inputs, and n_in == n_out gives the identity.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"interpolation_matrix: sizes must be positive, got {n_in} -> {n_out}")
    matrix = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        matrix[:, 0] = 1.0
        return matrix
    for i in range(n_out):
        pos = i * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        lo = min(int(math.floor(pos)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = pos - lo
        matrix[i, lo] += 1.0 - frac
        if frac > 0.0:
            matrix[i, hi] += frac
    return matrix


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes of an array with align-corners bilinear weights."""
    rows = interpolation_matrix(image.shape[-2], out_h, image.dtype)
    cols = interpolation_matrix(image.shape[-1], out_w, image.dtype)
    return rows @ image @ cols.T
