"""Primitive layer operations with hand-written forward and backward passes.

Activations are channel-first (C, H, W). Convolutions zero-pad by kernel//2
so stride-1 layers preserve resolution and stride-2 layers produce
ceil(size/2). The im2col matrix is built in output-row chunks to bound peak
memory, which keeps a 320x256 forward pass of the full-width network inside
a desktop memory budget.
"""

from __future__ import annotations

import numpy as np

# Upper bound on one im2col chunk, in bytes, before row-chunking kicks in.
_COL_CHUNK_BYTES = 64 * 1024 * 1024

BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    pad = kernel // 2
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(x_pad: np.ndarray, kernel: int, stride: int, row0: int, row1: int, out_w: int) -> np.ndarray:
    """Column matrix (C*k*k, (row1-row0)*out_w) for output rows [row0, row1)."""
    c = x_pad.shape[0]
    rows = row1 - row0
    col = np.empty((c, kernel, kernel, rows, out_w), dtype=x_pad.dtype)
    for ki in range(kernel):
        for kj in range(kernel):
            ys = row0 * stride + ki
            patch = x_pad[:, ys : ys + rows * stride : stride, kj : kj + out_w * stride : stride]
            col[:, ki, kj] = patch
    return col.reshape(c * kernel * kernel, rows * out_w)


def _row_chunks(out_h: int, out_w: int, col_height: int, itemsize: int):
    per_row = col_height * out_w * itemsize
    rows = max(1, int(_COL_CHUNK_BYTES // max(per_row, 1)))
    for r0 in range(0, out_h, rows):
        yield r0, min(r0 + rows, out_h)


def conv2d_forward(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, stride: int
) -> tuple[np.ndarray, tuple]:
    """2-D convolution; returns (y (O, H', W'), cache for backward)."""
    out_ch, in_ch, kernel, _ = weight.shape
    pad = kernel // 2
    h, w = x.shape[1:]
    out_h = conv_output_size(h, kernel, stride)
    out_w = conv_output_size(w, kernel, stride)
    x_pad = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    w_mat = weight.reshape(out_ch, -1)
    y = np.empty((out_ch, out_h, out_w), dtype=x.dtype)
    for r0, r1 in _row_chunks(out_h, out_w, w_mat.shape[1], x.itemsize):
        col = _im2col(x_pad, kernel, stride, r0, r1, out_w)
        y[:, r0:r1, :] = (w_mat @ col).reshape(out_ch, r1 - r0, out_w)
    if bias is not None:
        y += bias[:, None, None]
    cache = (x_pad, weight, stride, x.shape, bias is not None)
    return y, cache


def conv2d_backward(dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Gradients of a conv layer; returns (dx, dweight, dbias)."""
    x_pad, weight, stride, x_shape, has_bias = cache
    out_ch, in_ch, kernel, _ = weight.shape
    pad = kernel // 2
    out_h, out_w = dy.shape[1:]
    w_mat = weight.reshape(out_ch, -1)

    dw = np.zeros_like(w_mat)
    dx_pad = np.zeros_like(x_pad)
    for r0, r1 in _row_chunks(out_h, out_w, w_mat.shape[1], x_pad.itemsize):
        col = _im2col(x_pad, kernel, stride, r0, r1, out_w)
        dy_mat = dy[:, r0:r1, :].reshape(out_ch, -1)
        dw += dy_mat @ col.T
        dcol = (w_mat.T @ dy_mat).reshape(in_ch, kernel, kernel, r1 - r0, out_w)
        for ki in range(kernel):
            for kj in range(kernel):
                ys = r0 * stride + ki
                dx_pad[:, ys : ys + (r1 - r0) * stride : stride, kj : kj + out_w * stride : stride] += dcol[:, ki, kj]
    dx = dx_pad[:, pad : pad + x_shape[1], pad : pad + x_shape[2]] if pad else dx_pad
    dbias = dy.sum(axis=(1, 2)) if has_bias else None
    return dx, dw.reshape(weight.shape), dbias


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    update_stats: bool = False,
) -> tuple[np.ndarray, tuple | None]:
    """Per-channel batch normalization over the spatial axes.

    In training mode the batch statistics are used (and optionally folded
    into the running statistics); in inference mode the running statistics
    are used and no cache is produced.
    """
    if not training:
        inv_std = 1.0 / np.sqrt(running_var + BATCHNORM_EPS)
        y = gamma[:, None, None] * (x - running_mean[:, None, None]) * inv_std[:, None, None]
        y += beta[:, None, None]
        return y, None
    n = x.shape[1] * x.shape[2]
    mean = x.mean(axis=(1, 2))
    var = x.var(axis=(1, 2))
    inv_std = 1.0 / np.sqrt(var + BATCHNORM_EPS)
    x_hat = (x - mean[:, None, None]) * inv_std[:, None, None]
    y = gamma[:, None, None] * x_hat + beta[:, None, None]
    if update_stats:
        m = BATCHNORM_MOMENTUM
        running_mean *= 1.0 - m
        running_mean += m * mean
        unbiased = var * (n / max(n - 1, 1))
        running_var *= 1.0 - m
        running_var += m * unbiased
    return y, (x_hat, inv_std, gamma)


def batchnorm_backward(dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients through training-mode batchnorm; returns (dx, dgamma, dbeta)."""
    x_hat, inv_std, gamma = cache
    n = dy.shape[1] * dy.shape[2]
    dbeta = dy.sum(axis=(1, 2))
    dgamma = (dy * x_hat).sum(axis=(1, 2))
    dx_hat = dy * gamma[:, None, None]
    sum_dx_hat = dx_hat.sum(axis=(1, 2))
    sum_dx_hat_xhat = (dx_hat * x_hat).sum(axis=(1, 2))
    dx = (inv_std[:, None, None] / n) * (
        n * dx_hat - sum_dx_hat[:, None, None] - x_hat * sum_dx_hat_xhat[:, None, None]
    )
    return dx, dgamma, dbeta


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def sigmoid_scaled_forward(x: np.ndarray, scale: float) -> tuple[np.ndarray, np.ndarray]:
    # Numerically stable logistic, then scaled into (0, scale).
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    y *= scale
    return y, y


def sigmoid_scaled_backward(dy: np.ndarray, y: np.ndarray, scale: float) -> np.ndarray:
    return dy * y * (1.0 - y / scale)


_interp_matrix_cache: dict[tuple[int, int], np.ndarray] = {}


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense 1-D bilinear interpolation operator (n_out, n_in), half-pixel
    center (align-corners-false) convention with edge clamping."""
    key = (n_in, n_out)
    cached = _interp_matrix_cache.get(key)
    if cached is not None:
        return cached
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(int)
    frac = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    for r in range(n_out):
        m[r, lo[r]] += 1.0 - frac[r]
        m[r, hi[r]] += frac[r]
    _interp_matrix_cache[key] = m
    return m


def upsample_bilinear_forward(x: np.ndarray, out_h: int, out_w: int) -> tuple[np.ndarray, tuple]:
    """Bilinear resize of (C, H, W) to (C, out_h, out_w)."""
    h, w = x.shape[1:]
    my = interp_matrix(h, out_h).astype(x.dtype)
    mx = interp_matrix(w, out_w).astype(x.dtype)
    y = my @ (x @ mx.T)
    return y, (my, mx)


def upsample_bilinear_backward(dy: np.ndarray, cache: tuple) -> np.ndarray:
    my, mx = cache
    return my.T @ (dy @ mx)


def concat_forward(inputs: list[np.ndarray]) -> tuple[np.ndarray, list[int]]:
    return np.concatenate(inputs, axis=0), [a.shape[0] for a in inputs]


def concat_backward(dy: np.ndarray, channel_counts: list[int]) -> list[np.ndarray]:
    splits = np.cumsum(channel_counts)[:-1]
    return np.split(dy, splits, axis=0)
