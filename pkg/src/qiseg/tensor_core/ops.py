"""Forward/backward pairs for the dense operations used by the model.

Layout is channels-last: images and feature maps are ``(..., H, W, C)``;
any leading axes are treated as a batch. Every ``*_backward`` takes the
upstream gradient of a scalar loss with respect to the op's output and
returns gradients with respect to each input, in argument order.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError

# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    span = dilation * (k - 1) + 1
    return (size + 2 * padding - span) // stride + 1


def _check_conv(x, kernel, bias, stride, dilation, padding):
    if x.ndim < 3:
        raise ShapeError(f"conv2d input must be (..., H, W, C), got rank {x.ndim}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (kh, kw, Cin, Cout), got rank {kernel.ndim}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input Cin={x.shape[-1]} but kernel Cin={cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have length Cout={cout}, got shape {bias.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if dilation < 1:
        raise ShapeError(f"conv2d dilation must be >= 1, got {dilation}")
    if padding < 0:
        raise ShapeError(f"conv2d padding must be >= 0, got {padding}")
    ho = conv_output_size(x.shape[-3], kh, stride, dilation, padding)
    wo = conv_output_size(x.shape[-2], kw, stride, dilation, padding)
    if ho < 1:
        raise ShapeError(f"conv2d kernel height {kh} (dilation {dilation}) exceeds padded input height")
    if wo < 1:
        raise ShapeError(f"conv2d kernel width {kw} (dilation {dilation}) exceeds padded input width")
    return ho, wo


def _pad(x, padding):
    if padding == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 3) + [(padding, padding), (padding, padding), (0, 0)]
    return np.pad(x, widths)


def _taps(kh, kw, ho, wo, stride, dilation):
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            yield i, j, (slice(r0, r0 + stride * (ho - 1) + 1, stride),
                         slice(c0, c0 + stride * (wo - 1) + 1, stride))


def _im2col(xp, kh, kw, ho, wo, stride, dilation):
    cols = np.empty(xp.shape[:-3] + (ho, wo, kh, kw, xp.shape[-1]), dtype=xp.dtype)
    for i, j, (rs, cs) in _taps(kh, kw, ho, wo, stride, dilation):
        cols[..., i, j, :] = xp[..., rs, cs, :]
    return cols


def conv2d_forward(x, kernel, bias, stride=1, dilation=1, padding=0):
    """Zero-padded 2D cross-correlation.

    Output extent per spatial axis is
    ``(size + 2*padding - dilation*(k-1) - 1) // stride + 1``.
    """
    x = np.asarray(x)
    ho, wo = _check_conv(x, kernel, bias, stride, dilation, padding)
    kh, kw, cin, cout = kernel.shape
    cols = _im2col(_pad(x, padding), kh, kw, ho, wo, stride, dilation)
    flat = cols.reshape(cols.shape[:-3] + (kh * kw * cin,))
    return flat @ kernel.reshape(kh * kw * cin, cout) + bias


def conv2d_backward(grad_out, x, kernel, stride=1, dilation=1, padding=0):
    x = np.asarray(x)
    kh, kw, cin, cout = kernel.shape
    ho, wo = grad_out.shape[-3], grad_out.shape[-2]
    xp = _pad(x, padding)
    cols = _im2col(xp, kh, kw, ho, wo, stride, dilation)
    g2 = grad_out.reshape(-1, cout)
    c2 = cols.reshape(-1, kh * kw * cin)
    grad_kernel = (c2.T @ g2).reshape(kernel.shape)
    grad_bias = g2.sum(axis=0)
    dcols = (grad_out @ kernel.reshape(kh * kw * cin, cout).T).reshape(cols.shape)
    dxp = np.zeros_like(xp)
    for i, j, (rs, cs) in _taps(kh, kw, ho, wo, stride, dilation):
        dxp[..., rs, cs, :] += dcols[..., i, j, :]
    if padding:
        dxp = dxp[..., padding:-padding, padding:-padding, :]
    return dxp, grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------


def dense_forward(x, weights, bias):
    x = np.asarray(x)
    if weights.ndim != 2:
        raise ShapeError(f"dense weights must be a matrix, got rank {weights.ndim}")
    n, m = weights.shape
    if x.shape[-1] != n:
        raise ShapeError(f"dense input length {x.shape[-1]} does not match weight rows {n}")
    if bias.shape != (m,):
        raise ShapeError(f"dense bias must have length {m}, got shape {bias.shape}")
    return x @ weights + bias


def dense_backward(grad_out, x, weights):
    x = np.asarray(x)
    gx = grad_out @ weights.T
    gw = x.reshape(-1, x.shape[-1]).T @ grad_out.reshape(-1, weights.shape[1])
    gb = grad_out.reshape(-1, weights.shape[1]).sum(axis=0)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def activation_forward(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(grad_out, x, kind):
    if kind == "relu":
        return grad_out * (np.asarray(x) > 0)
    if kind == "sigmoid":
        s = sigmoid(x)
        return grad_out * s * (1.0 - s)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# bilinear resize (half-pixel centers, edge-clamped)
# ---------------------------------------------------------------------------


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` linear-interpolation matrix.

    Sample ``o`` sits at source coordinate ``(o + 0.5) * n_in / n_out - 0.5``,
    clamped to ``[0, n_in - 1]``.
    """
    if n_out < 1 or n_in < 1:
        raise ShapeError(f"resize extents must be >= 1, got in={n_in} out={n_out}")
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_forward(fmap, out_h: int, out_w: int):
    fmap = np.asarray(fmap)
    ry = interp_matrix(fmap.shape[-3], out_h, fmap.dtype)
    rx = interp_matrix(fmap.shape[-2], out_w, fmap.dtype)
    return np.einsum("oh,...hwc,pw->...opc", ry, fmap, rx, optimize=True)


def resize_backward(grad_out, in_h: int, in_w: int):
    ry = interp_matrix(in_h, grad_out.shape[-3], grad_out.dtype)
    rx = interp_matrix(in_w, grad_out.shape[-2], grad_out.dtype)
    return np.einsum("oh,...opc,pw->...hwc", ry, grad_out, rx, optimize=True)


# ---------------------------------------------------------------------------
# global average pooling
# ---------------------------------------------------------------------------


def gap_forward(fmap):
    fmap = np.asarray(fmap)
    if fmap.ndim < 3 or fmap.shape[-3] < 1 or fmap.shape[-2] < 1:
        raise ShapeError(f"global_avg_pool expects (..., H, W, C) with H, W >= 1, got {fmap.shape}")
    return fmap.mean(axis=(-3, -2))


def gap_backward(grad_out, in_shape):
    h, w = in_shape[-3], in_shape[-2]
    g = np.asarray(grad_out)[..., None, None, :] / (h * w)
    return np.broadcast_to(g, in_shape).copy()
