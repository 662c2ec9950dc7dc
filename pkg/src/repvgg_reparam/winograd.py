"""
F(2x2, 3x3) Winograd convolution for stride-1 3x3 layers.

Each 4x4 input tile d and 3x3 kernel k produce a 2x2 output tile
    Y = AT [(G k GT) * (BT d B)] A
with 16 elementwise multiplies instead of the 36 of direct evaluation.
"""

import logging
import weakref
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from repvgg_reparam.common import (
    ConvParams,
    LayerCost,
    UnsupportedConfigurationError,
    ValidationError,
)
from repvgg_reparam.tensor_ops import (
    check_conv_shapes,
    conv2d,
    ensure_tensor4,
    pad_spatial,
)

TILE_OUT = 2
TILE_IN = 4

FORWARD_ALGORITHMS = ("direct", "winograd", "auto")
AUTO_MIN_GROUP_CHANNELS = 16

# Keyed by ConvParams identity; entries go away with the layer.
_kernel_cache: "weakref.WeakKeyDictionary[ConvParams, np.ndarray]" = (
    weakref.WeakKeyDictionary()
)

BT = np.array(
    [
        [1, 0, -1, 0],
        [0, 1, 1, 0],
        [0, -1, 1, 0],
        [0, 1, 0, -1],
    ],
    dtype=np.float64,
)

G = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.5, 0.5, 0.5],
        [0.5, -0.5, 0.5],
        [0.0, 0.0, 1.0],
    ],
    dtype=np.float64,
)

AT = np.array(
    [
        [1, 1, 1, 0],
        [0, 1, -1, -1],
    ],
    dtype=np.float64,
)


@dataclass
class MulCounter:
    """Accumulates elementwise-stage multiplies performed by winograd_conv3x3."""

    elementwise: int = 0
    calls: int = 0


def is_winograd_eligible(p: ConvParams) -> bool:
    return p.kernel_size == 3 and p.stride == 1


def transform_kernel(kernel: np.ndarray) -> np.ndarray:
    """
    Kernel transform U = G k GT for every (out, in/groups) 3x3 slice.

    Computed in float64 and returned in the kernel's dtype.

    Returns:
        Array shaped (c_out, c_in/groups, 4, 4)
    """
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise UnsupportedConfigurationError(
            f"Winograd kernel transform needs 3x3 kernels, got shape {kernel.shape}"
        )
    u = G @ kernel.astype(np.float64) @ G.T
    return u.astype(kernel.dtype)


def winograd_tile(d: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Single-tile F(2x2, 3x3): 4x4 input tile and 3x3 kernel to a 2x2 output."""
    return AT @ ((G @ k @ G.T) * (BT @ d @ BT.T)) @ AT.T


def winograd_conv3x3(
    x,
    p: ConvParams,
    transformed_kernel: np.ndarray | None = None,
    counter: MulCounter | None = None,
) -> np.ndarray:
    """
    Stride-1 3x3 convolution via F(2x2, 3x3), same contract as tensor_ops.conv2d.

    The padded input is zero-extended to a whole number of 2x2 output tiles and
    the result cropped back.

    Args:
        x: Input tensor (n, c, h, w)
        p: 3x3 stride-1 convolution parameters, any padding and groups
        transformed_kernel: Precomputed transform_kernel(p.kernel), if cached
        counter: Optional MulCounter updated with the elementwise multiply count

    Raises:
        UnsupportedConfigurationError: kernel is not 3x3 or stride is not 1
    """
    if not is_winograd_eligible(p):
        raise UnsupportedConfigurationError(
            f"Winograd F(2x2,3x3) needs a 3x3 stride-1 conv, got "
            f"{p.kernel_size}x{p.kernel_size} stride {p.stride}"
        )
    x = ensure_tensor4(x)
    out_h, out_w = check_conv_shapes(x, p)
    n, c, _, _ = x.shape
    g = p.groups
    cg = c // g
    c_out = p.out_channels
    og = c_out // g
    dtype = x.dtype

    tiles_h = -(-out_h // TILE_OUT)
    tiles_w = -(-out_w // TILE_OUT)
    padded = pad_spatial(x, p.padding)
    extra_h = TILE_OUT * tiles_h + 2 - padded.shape[2]
    extra_w = TILE_OUT * tiles_w + 2 - padded.shape[3]
    if extra_h or extra_w:
        padded = np.pad(padded, ((0, 0), (0, 0), (0, extra_h), (0, extra_w)))

    tiles = sliding_window_view(padded, (TILE_IN, TILE_IN), axis=(2, 3))
    tiles = tiles[:, :, ::TILE_OUT, ::TILE_OUT]
    bt = BT.astype(dtype)
    v = bt @ tiles @ bt.T
    num_tiles = tiles_h * tiles_w

    # (16, g, c/g, n * tiles): the 16 transform-domain positions become a batch of GEMMs
    v = v.reshape(n, g, cg, num_tiles, 16).transpose(4, 1, 2, 0, 3)
    v = v.reshape(16, g, cg, n * num_tiles)

    if transformed_kernel is None:
        transformed_kernel = transform_kernel(p.kernel)
    u = transformed_kernel.astype(dtype, copy=False).reshape(g, og, cg, 16)
    u = u.transpose(3, 0, 1, 2)

    m = np.matmul(u, v)
    if counter is not None:
        counter.elementwise += 16 * g * og * cg * n * num_tiles
        counter.calls += 1

    m = m.reshape(TILE_IN, TILE_IN, c_out, n, tiles_h, tiles_w)
    m = m.transpose(3, 2, 4, 5, 0, 1)
    at = AT.astype(dtype)
    y = at @ m @ at.T
    y = y.transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c_out, TILE_OUT * tiles_h, TILE_OUT * tiles_w
    )
    y = y[:, :, :out_h, :out_w]
    if p.bias is not None:
        y = y + p.bias.astype(dtype, copy=False)[None, :, None, None]
    return np.ascontiguousarray(y)


def cached_kernel_transform(p: ConvParams) -> np.ndarray:
    """transform_kernel(p.kernel), computed once per ConvParams instance."""
    u = _kernel_cache.get(p)
    if u is None:
        u = transform_kernel(p.kernel)
        _kernel_cache[p] = u
    return u


def conv2d_with_algorithm(x, p: ConvParams, algorithm: str = "direct") -> np.ndarray:
    """
    Convolution that picks its kernel by algorithm name.

    Args:
        x: Input tensor (n, c, h, w)
        p: Convolution parameters
        algorithm: "direct" (im2col everywhere), "winograd" (F(2x2,3x3) on every
            eligible layer) or "auto" (Winograd only on eligible layers with at
            least AUTO_MIN_GROUP_CHANNELS input channels per group)
    """
    if algorithm not in FORWARD_ALGORITHMS:
        raise ValidationError(
            f"Unknown forward algorithm '{algorithm}'. "
            f"Valid options are: {', '.join(FORWARD_ALGORITHMS)}."
        )
    if algorithm == "direct":
        return conv2d(x, p)
    if is_winograd_eligible(p) and (
        algorithm == "winograd" or p.kernel.shape[1] >= AUTO_MIN_GROUP_CHANNELS
    ):
        return winograd_conv3x3(x, p, cached_kernel_transform(p))
    logging.debug(
        f"Using direct conv for {p.kernel_size}x{p.kernel_size} stride {p.stride} "
        f"layer ({p.in_channels}->{p.out_channels}, groups {p.groups}) under '{algorithm}'"
    )
    return conv2d(x, p)


def wino_mul_count(layer: LayerCost) -> int:
    """
    Multiplications under the Winograd convention: a stride-1 3x3 conv costs
    4/9 of its direct multiplies, anything else costs its direct multiplies.
    Transform-stage multiplies are not counted.
    """
    direct = layer.direct_muls
    if layer.kernel_h == 3 and layer.kernel_w == 3 and layer.stride == 1:
        return direct * 4 // 9
    return direct
