"""
Reference neural operators on dense (batch, channel, height, width) arrays.

Two convolution paths share one contract: an im2col + matmul path used in
production and a naive nested-loop path used as the oracle in tests.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from repvgg_reparam.common import BnParams, ConvParams, ShapeError, ValidationError

CONV_METHODS = ("im2col", "naive")


def ensure_tensor4(x, name="input") -> np.ndarray:
    """Return `x` as an ndarray, raising ShapeError unless it is rank 4."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(
            f"{name} must be a rank-4 (n, c, h, w) tensor, got shape {x.shape}"
        )
    return x


def conv_output_size(size: int, kernel_size: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel_size) // stride + 1


def check_conv_shapes(x: np.ndarray, p: ConvParams) -> tuple[int, int]:
    """
    Validate an input against convolution parameters.

    Returns:
        Output spatial size (out_h, out_w)
    """
    _, c, h, w = x.shape
    if c % p.groups:
        raise ShapeError(
            f"Input channels ({c}) must be divisible by groups ({p.groups})"
        )
    if p.kernel.shape[1] != c // p.groups:
        raise ShapeError(
            f"Kernel expects {p.in_channels} input channels "
            f"({p.kernel.shape[1]} per group x {p.groups} groups), input has {c}"
        )
    k = p.kernel_size
    out_h = conv_output_size(h, k, p.stride, p.padding)
    out_w = conv_output_size(w, k, p.stride, p.padding)
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(
            f"Convolution of {h}x{w} input with {k}x{k} kernel, stride {p.stride}, "
            f"padding {p.padding} produces an empty {out_h}x{out_w} output"
        )
    return out_h, out_w


def pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def im2col(
    x: np.ndarray, kernel_size: int, stride: int, padding: int, groups: int
) -> np.ndarray:
    """
    Unfold sliding windows into columns, one matrix per group.

    Returns:
        Array shaped (n, groups, out_h * out_w, c/groups * k * k); the last axis
        is ordered (channel, kernel row, kernel column) to match a reshaped kernel.
    """
    n, c, _, _ = x.shape
    k = kernel_size
    windows = sliding_window_view(pad_spatial(x, padding), (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    cg = c // groups
    cols = windows.reshape(n, groups, cg, out_h, out_w, k, k)
    cols = cols.transpose(0, 1, 3, 4, 2, 5, 6)
    return cols.reshape(n, groups, out_h * out_w, cg * k * k)


def col2im(
    cols: np.ndarray,
    input_shape: tuple[int, ...],
    kernel_size: int,
    stride: int,
    padding: int,
    groups: int,
) -> np.ndarray:
    """
    Scatter-add columns back onto an input-shaped array (adjoint of im2col).
    """
    n, c, h, w = input_shape
    k = kernel_size
    cg = c // groups
    out_h = conv_output_size(h, k, stride, padding)
    out_w = conv_output_size(w, k, stride, padding)
    patches = cols.reshape(n, groups, out_h, out_w, cg, k, k)
    patches = patches.transpose(0, 1, 4, 5, 6, 2, 3).reshape(n, c, k, k, out_h, out_w)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            padded[
                :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ] += patches[:, :, i, j]
    if padding:
        return padded[:, :, padding : padding + h, padding : padding + w]
    return padded


def conv2d(x, p: ConvParams, method: str = "im2col") -> np.ndarray:
    """
    Grouped 2-D convolution.

    Output channel i reads only the input channels of group i // (c_out / groups).
    The result has the input's dtype.

    Args:
        x: Input tensor (n, c, h, w)
        p: Convolution parameters
        method: "im2col" (matmul-based) or "naive" (nested loops, float64 accumulation)
    """
    x = ensure_tensor4(x)
    out_h, out_w = check_conv_shapes(x, p)
    if method == "naive":
        return _conv2d_naive(x, p, out_h, out_w)
    if method != "im2col":
        raise ValidationError(
            f"Unknown convolution method '{method}'. Valid options are: {', '.join(CONV_METHODS)}."
        )

    n = x.shape[0]
    g = p.groups
    cols = im2col(x, p.kernel_size, p.stride, p.padding, g)
    weights = p.kernel.astype(x.dtype, copy=False).reshape(g, p.out_channels // g, -1)
    out = np.matmul(cols, weights.transpose(0, 2, 1))
    out = out.transpose(0, 1, 3, 2).reshape(n, p.out_channels, out_h, out_w)
    if p.bias is not None:
        out = out + p.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return np.ascontiguousarray(out)


def _conv2d_naive(x: np.ndarray, p: ConvParams, out_h: int, out_w: int) -> np.ndarray:
    n, c, _, _ = x.shape
    k = p.kernel_size
    s = p.stride
    cg = c // p.groups
    og = p.out_channels // p.groups
    xp = pad_spatial(x.astype(np.float64), p.padding)
    kernel = p.kernel.astype(np.float64)
    bias = None if p.bias is None else p.bias.astype(np.float64)
    out = np.zeros((n, p.out_channels, out_h, out_w), dtype=np.float64)
    for b in range(n):
        for o in range(p.out_channels):
            first = (o // og) * cg
            for y in range(out_h):
                for xx in range(out_w):
                    acc = 0.0
                    for ci in range(cg):
                        for i in range(k):
                            for j in range(k):
                                acc += float(xp[b, first + ci, y * s + i, xx * s + j]) * float(
                                    kernel[o, ci, i, j]
                                )
                    if bias is not None:
                        acc += float(bias[o])
                    out[b, o, y, xx] = acc
    return out.astype(x.dtype)


def batch_norm_infer(x, bn: BnParams) -> np.ndarray:
    """Inference BN: (x - mu) * gamma / sigma + beta per channel."""
    x = ensure_tensor4(x)
    if x.shape[1] != bn.channels:
        raise ShapeError(
            f"BN has {bn.channels} channels but input has {x.shape[1]}"
        )
    scale = (bn.gamma.astype(np.float64) / bn.sigma()).astype(x.dtype)
    mu = bn.mu.astype(x.dtype, copy=False)[None, :, None, None]
    beta = bn.beta.astype(x.dtype, copy=False)[None, :, None, None]
    return (x - mu) * scale[None, :, None, None] + beta


def relu(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, np.zeros((), dtype=x.dtype))


def global_avg_pool(x) -> np.ndarray:
    """Spatial mean, (n, c, h, w) -> (n, c, 1, 1)."""
    x = ensure_tensor4(x)
    return x.mean(axis=(2, 3), keepdims=True, dtype=x.dtype)


def fully_connected(x, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """
    Per-example matrix-vector product.

    Args:
        x: (n, c) or (n, c, 1, 1) features
        weights: (num_outputs, c)
        bias: (num_outputs,) or None

    Returns:
        (n, num_outputs)
    """
    x = np.asarray(x)
    if x.ndim == 4:
        if x.shape[2:] != (1, 1):
            raise ShapeError(
                f"Fully-connected input must be pooled to 1x1, got spatial {x.shape[2:]}"
            )
        x = x.reshape(x.shape[0], x.shape[1])
    if x.ndim != 2 or weights.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise ShapeError(
            f"Fully-connected weights {weights.shape} incompatible with input {x.shape}"
        )
    out = x @ weights.astype(x.dtype, copy=False).T
    if bias is not None:
        if bias.shape != (weights.shape[0],):
            raise ShapeError(
                f"Fully-connected bias {bias.shape} does not match {weights.shape[0]} outputs"
            )
        out = out + bias.astype(x.dtype, copy=False)
    return out
