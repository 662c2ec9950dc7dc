"""
Structural re-parameterization: collapse a trained three-branch block into one
3x3 convolution with bias, and a whole train-mode model into a plain stack.

All fusion arithmetic runs in float64 and is cast back to the model dtype once.
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from repvgg_reparam.block import RepVggBlock
from repvgg_reparam.common import BnParams, ConvParams, ShapeError, ValidationError
from repvgg_reparam.winograd import cached_kernel_transform

if TYPE_CHECKING:
    from repvgg_reparam.arch import Model


@dataclass(frozen=True, eq=False)
class FusedConv(ConvParams):
    """A converted block: 3x3 conv, padding 1, always with a bias."""

    def __post_init__(self):
        super().__post_init__()
        if self.kernel_size != 3 or self.padding != 1:
            raise ValidationError(
                f"Fused conv must be 3x3 with padding 1, got "
                f"{self.kernel_size}x{self.kernel_size} padding {self.padding}"
            )
        if self.bias is None:
            raise ValidationError("Fused conv must carry a bias")

    @property
    def winograd_kernel(self) -> np.ndarray:
        """Winograd-domain kernel, transformed on first use and cached."""
        return cached_kernel_transform(self)


def _fuse_bn_f64(kernel: np.ndarray, bn: BnParams) -> tuple[np.ndarray, np.ndarray]:
    if bn.channels != kernel.shape[0]:
        raise ShapeError(
            f"BN has {bn.channels} channels but conv has {kernel.shape[0]} outputs"
        )
    scale = bn.gamma.astype(np.float64) / bn.sigma()
    fused_kernel = kernel.astype(np.float64) * scale[:, None, None, None]
    fused_bias = bn.beta.astype(np.float64) - bn.mu.astype(np.float64) * scale
    return fused_kernel, fused_bias


def fuse_bn(conv: ConvParams, bn: BnParams) -> tuple[np.ndarray, np.ndarray]:
    """
    Fold an inference BN into the conv it follows.

    W'_i = (gamma_i / sigma_i) * W_i and b'_i = beta_i - mu_i * gamma_i / sigma_i,
    so that bn(conv(x)) == conv'(x) + b'.

    Args:
        conv: Bias-free convolution
        bn: BN over the conv's output channels

    Returns:
        (kernel, bias) in the conv kernel's dtype
    """
    if conv.bias is not None:
        raise ValidationError("fuse_bn expects a bias-free convolution")
    kernel, bias = _fuse_bn_f64(conv.kernel, bn)
    dtype = conv.kernel.dtype
    return kernel.astype(dtype), bias.astype(dtype)


def pad_1x1_to_3x3(kernel1x1: np.ndarray) -> np.ndarray:
    """Zero-pad a (c_out, c_in/g, 1, 1) kernel to 3x3 with the value at the center."""
    if kernel1x1.ndim != 4 or kernel1x1.shape[2:] != (1, 1):
        raise ShapeError(f"Expected a 1x1 kernel, got shape {kernel1x1.shape}")
    return np.pad(kernel1x1, ((0, 0), (0, 0), (1, 1), (1, 1)))


def identity_to_1x1(channels: int, groups: int = 1, dtype="float32") -> np.ndarray:
    """
    1x1 kernel that makes a grouped conv the identity map.

    Returns:
        (channels, channels/groups, 1, 1) kernel with kernel[i, i % (channels/groups)] = 1
    """
    if channels <= 0 or groups <= 0 or channels % groups:
        raise ShapeError(
            f"Channels ({channels}) must be a positive multiple of groups ({groups})"
        )
    per_group = channels // groups
    kernel = np.zeros((channels, per_group, 1, 1), dtype=dtype)
    rows = np.arange(channels)
    kernel[rows, rows % per_group, 0, 0] = 1
    return kernel


def convert_block(block: RepVggBlock) -> FusedConv:
    """
    Sum the BN-fused 3x3 kernel with the padded BN-fused 1x1 kernel and the
    padded BN-fused identity kernel, each when the block has that branch, into
    one 3x3 conv.
    """
    dtype = block.conv3.kernel.dtype
    kernel, bias = _fuse_bn_f64(block.conv3.kernel, block.bn3)
    if block.conv1 is not None:
        k1, b1 = _fuse_bn_f64(block.conv1.kernel, block.bn1)
        kernel = kernel + pad_1x1_to_3x3(k1)
        bias = bias + b1
    if block.bn_id is not None:
        identity = identity_to_1x1(block.out_channels, block.groups, dtype=np.float64)
        kid, bid = _fuse_bn_f64(identity, block.bn_id)
        kernel = kernel + pad_1x1_to_3x3(kid)
        bias = bias + bid
    logging.debug(
        f"Converted block {block.in_channels}->{block.out_channels} stride {block.stride} "
        f"groups {block.groups} ({block.num_branches} branches)"
    )
    return FusedConv(
        kernel=kernel.astype(dtype),
        bias=bias.astype(dtype),
        stride=block.stride,
        padding=1,
        groups=block.groups,
    )


def convert_model(model: "Model") -> "Model":
    """
    Convert every block of a train-mode model; the head is carried over unchanged.
    A deploy-mode model is returned as is.
    """
    if model.mode == "deploy":
        logging.info(f"Model {model.spec.name} is already in deploy mode, nothing to convert")
        return model
    if model.mode != "train":
        raise ValidationError(f"Unknown model mode '{model.mode}'")
    layers = [dataclasses.replace(layer, op=convert_block(layer.op)) for layer in model.layers]
    converted = dataclasses.replace(model, mode="deploy", layers=layers)
    logging.info(
        f"Converted {len(layers)} blocks of {model.spec.name}: "
        f"{model.num_scalars:,} -> {converted.num_scalars:,} stored scalars"
    )
    return converted
