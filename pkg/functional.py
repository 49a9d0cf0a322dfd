"""
functional.py — Differentiable layer ops for small convolutional classifiers.

Images are batched as ``[B, C, H, W]``; a single ``[C, H, W]`` image is
accepted by the convolution and pooling ops and returned unbatched.
Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import BN_EPS, BN_MOMENTUM
from errors import DegenerateBatchError, DimensionError, LabelError
from tensor import Tensor, make_result


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected [B, C, H, W] or [C, H, W], got shape {x.shape}")
    return x, False


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """View of every receptive field: [B, C, out_h, out_w, kh, kw]."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]


def _fold(cols: np.ndarray, padded_shape: tuple[int, ...], stride: int) -> np.ndarray:
    """Scatter-add window gradients [B, C, out_h, out_w, kh, kw] back onto the padded input."""
    out = np.zeros(padded_shape, dtype=cols.dtype)
    _, _, out_h, out_w, kh, kw = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols[..., i, j]
    return out


# ── Convolution ─────────────────────────────────────────────────────────────

def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation; ``w`` is [C_out, C_in / groups, k, k]."""
    x, unbatched = _batched(x)
    batch, c_in, height, width = x.shape
    c_out, c_group, kh, kw = w.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise DimensionError(f"channels ({c_in} in, {c_out} out) not divisible into {groups} groups")
    if c_group * groups != c_in:
        raise DimensionError(f"weight expects {c_group * groups} input channels, input has {c_in}")
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {height}x{width} (pad {padding})")

    out_h = conv_output_size(height, kh, stride, padding)
    out_w = conv_output_size(width, kw, stride, padding)
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad)
    cols = _windows(xp, kh, kw, stride, out_h, out_w)
    cols = cols.reshape(batch, groups, c_group, out_h, out_w, kh, kw)
    wg = w.data.reshape(groups, c_out // groups, c_group, kh, kw)
    out = np.einsum("bgchwij,gocij->bgohw", cols, wg, optimize=True).reshape(batch, c_out, out_h, out_w)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gg = g.reshape(batch, groups, c_out // groups, out_h, out_w)
        grad_w = np.einsum("bgohw,bgchwij->gocij", gg, cols, optimize=True).reshape(w.shape)
        grad_cols = np.einsum("bgohw,gocij->bgchwij", gg, wg, optimize=True)
        grad_cols = grad_cols.reshape(batch, c_in, out_h, out_w, kh, kw)
        grad_xp = _fold(grad_cols, xp.shape, stride)
        grad_x = grad_xp[:, :, padding : padding + height, padding : padding + width]
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    result = make_result(out, inputs, backward)
    return result.reshape(result.shape[1:]) if unbatched else result


def grouped_conv2d(x: Tensor, w: Tensor, groups: int, stride: int = 1, padding: int = 0) -> Tensor:
    return conv2d(x, w, stride=stride, padding=padding, groups=groups)


# ── Normalization ───────────────────────────────────────────────────────────

def _stat_axes(x: Tensor) -> tuple[int, ...]:
    if x.ndim < 2:
        raise DimensionError(f"batch norm needs [B, C, ...], got shape {x.shape}")
    return (0,) + tuple(range(2, x.ndim))


def channel_shape(x: Tensor) -> tuple[int, ...]:
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def batch_statistics(x: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable per-channel batch mean and biased variance."""
    axes = _stat_axes(x)
    mean = x.mean(axis=axes)
    centered = x - mean.reshape(channel_shape(x))
    var = (centered * centered).mean(axis=axes)
    return mean, var


def batchnorm_forward(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize per channel; returns (output, new running mean, new running var).

    Train mode uses batch statistics and updates the running ones as
    ``momentum * old + (1 - momentum) * batch``; eval mode uses the running ones.
    """
    axes = _stat_axes(x)
    shape = channel_shape(x)
    data = x.data
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError(f"train-mode batch norm needs B >= 2, got B={x.shape[0]}")
        mean = data.mean(axis=axes)
        var = data.var(axis=axes)
        new_mean = momentum * running_mean + (1.0 - momentum) * mean
        new_var = momentum * running_var + (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(data.dtype)
    xhat = (data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    count = data.size // data.shape[1]

    def backward(g):
        grad_gamma = (g * xhat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if training:
            grad_x = (inv_std.reshape(shape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = dxhat * inv_std.reshape(shape)
        return grad_x, grad_gamma, grad_beta

    result = make_result(out, (x, gamma, beta), backward)
    return result, np.asarray(new_mean, dtype=running_mean.dtype), np.asarray(new_var, dtype=running_var.dtype)


# ── Activations, pooling, heads ─────────────────────────────────────────────

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    x, unbatched = _batched(x)
    stride = stride or kernel
    batch, channels, height, width = x.shape
    if kernel > height or kernel > width:
        raise DimensionError(f"pool kernel {kernel} larger than input {height}x{width}")
    out_h = conv_output_size(height, kernel, stride, 0)
    out_w = conv_output_size(width, kernel, stride, 0)
    cols = _windows(x.data, kernel, kernel, stride, out_h, out_w).reshape(
        batch, channels, out_h, out_w, kernel * kernel
    )
    arg = cols.argmax(axis=-1)
    out = np.take_along_axis(cols, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        grad_cols = np.zeros((batch, channels, out_h, out_w, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(grad_cols, arg[..., None], g[..., None], axis=-1)
        grad_cols = grad_cols.reshape(batch, channels, out_h, out_w, kernel, kernel)
        return (_fold(grad_cols, x.shape, stride),)

    result = make_result(out, (x,), backward)
    return result.reshape(result.shape[1:]) if unbatched else result


def _adaptive_bins(size: int, out: int) -> list[tuple[int, int]]:
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def adaptive_avg_pool2d(x: Tensor, output_size: int) -> Tensor:
    x, unbatched = _batched(x)
    batch, channels, height, width = x.shape
    rows = _adaptive_bins(height, output_size)
    cols = _adaptive_bins(width, output_size)
    out = np.empty((batch, channels, output_size, output_size), dtype=x.data.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                grad[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / area)[:, :, None, None]
        return (grad,)

    result = make_result(out, (x,), backward)
    return result.reshape(result.shape[1:]) if unbatched else result


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear expects [B, {weight.shape[1]}], got {x.shape}")
    out = x @ weight.transpose()
    return out if bias is None else out + bias


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch; ``labels`` are integer class indices."""
    labels = np.asarray(labels)
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return make_result(np.asarray(loss), (logits,), backward)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax on plain arrays (max-subtracted)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
