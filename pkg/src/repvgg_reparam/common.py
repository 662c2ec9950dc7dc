"""
Shared constants, exceptions, data models, and utilities used across modules.
"""

from dataclasses import dataclass

import numpy as np

# Configuration
DEFAULT_BN_EPS = 1e-5
DEFAULT_INPUT_RESOLUTION = 224
WEIGHT_FILE_MAGIC = b"RVGG"
WEIGHT_FILE_VERSION = 1
PAYLOAD_ALIGNMENT = 64

SUPPORTED_KERNEL_SIZES = (1, 3)
SUPPORTED_DTYPES = ("float32", "float64")


def as_dtype(name: str) -> np.dtype:
    """
    Resolve a dtype name to a numpy dtype, restricted to the supported set.

    Args:
        name: "float32" or "float64"

    Returns:
        The numpy dtype
    """
    if name not in SUPPORTED_DTYPES:
        raise ValidationError(
            f"Unsupported dtype '{name}'. Valid options are: {', '.join(SUPPORTED_DTYPES)}."
        )
    return np.dtype(name)


# Exception Classes


class RepVggError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RepVggError):
    """Raised when tensor dimensions or channel counts are incompatible."""


class UnsupportedConfigurationError(RepVggError):
    """Raised when a kernel is asked to run a layer configuration it cannot handle."""


class ValidationError(RepVggError):
    """Raised when input validation fails."""


class ModeError(RepVggError):
    """Raised when an operation requires a model in a different mode."""


class WeightFileError(RepVggError):
    """Raised when a weight file cannot be parsed."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message if field is None else f"{field}: {message}")


class TrainingDivergedError(RepVggError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message, epoch=None, last_finite_model=None):
        self.epoch = epoch
        self.last_finite_model = last_finite_model
        super().__init__(message)


# Data Models


@dataclass(frozen=True, eq=False)
class ConvParams:
    """
    Convolution kernel in (out_channels, in_channels/groups, k, k) layout with
    an optional per-output-channel bias. Stride and padding apply to both axes.
    """

    kernel: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(
                f"Convolution kernel must be rank 4, got shape {self.kernel.shape}"
            )
        c_out, _, kh, kw = self.kernel.shape
        if kh != kw or kh not in SUPPORTED_KERNEL_SIZES:
            raise ShapeError(
                f"Only square {' or '.join(f'{k}x{k}' for k in SUPPORTED_KERNEL_SIZES)} "
                f"kernels are supported, got {kh}x{kw}"
            )
        if self.groups < 1 or c_out % self.groups:
            raise ShapeError(
                f"Output channels ({c_out}) must be divisible by groups ({self.groups})"
            )
        if self.stride < 1:
            raise ValidationError(f"Stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValidationError(f"Padding must be non-negative, got {self.padding}")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise ShapeError(
                f"Bias shape {self.bias.shape} does not match {c_out} output channels"
            )

    @property
    def out_channels(self) -> int:
        return int(self.kernel.shape[0])

    @property
    def in_channels(self) -> int:
        return int(self.kernel.shape[1]) * self.groups

    @property
    def kernel_size(self) -> int:
        return int(self.kernel.shape[2])

    @property
    def num_scalars(self) -> int:
        return int(self.kernel.size) + (0 if self.bias is None else int(self.bias.size))


@dataclass(frozen=True, eq=False)
class BnParams:
    """
    Inference-time batch normalization statistics and affine parameters.

    Stores the running variance rather than sigma; sigma is sqrt(var + eps).
    """

    mu: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_BN_EPS

    def __post_init__(self):
        shapes = {v.shape for v in (self.mu, self.var, self.gamma, self.beta)}
        if len(shapes) != 1 or self.mu.ndim != 1:
            raise ShapeError(
                f"BN vectors must be 1-D with identical length, got shapes "
                f"mu={self.mu.shape} var={self.var.shape} "
                f"gamma={self.gamma.shape} beta={self.beta.shape}"
            )
        if self.eps <= 0:
            raise ValidationError(f"BN eps must be positive, got {self.eps}")
        if np.any(self.var < 0):
            raise ValidationError("BN running variance must be non-negative")

    @property
    def channels(self) -> int:
        return int(self.mu.shape[0])

    @property
    def num_scalars(self) -> int:
        # mu, var, gamma and beta are all persisted state
        return 4 * self.channels

    def sigma(self) -> np.ndarray:
        """Per-channel sigma = sqrt(var + eps), evaluated in float64."""
        return np.sqrt(self.var.astype(np.float64) + self.eps)

    @classmethod
    def identity(cls, channels: int, eps: float = DEFAULT_BN_EPS, dtype="float32"):
        """BN that maps its input to itself (mu=0, sigma=1, gamma=1, beta=0)."""
        return cls(
            mu=np.zeros(channels, dtype=dtype),
            var=np.full(channels, 1.0 - eps, dtype=dtype),
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            eps=eps,
        )


@dataclass(frozen=True)
class LayerCost:
    """Shape description of one conv or fully-connected layer for cost accounting."""

    layer_index: int
    stage: int
    c_in: int
    c_out: int
    kernel_h: int
    kernel_w: int
    stride: int
    groups: int
    out_h: int
    out_w: int
    mode: str = "deploy"
    kind: str = "conv"
    has_bias: bool = True
    batch: int = 1

    @property
    def direct_muls(self) -> int:
        """Multiply count of direct evaluation: outElems * kH * kW * cIn/groups."""
        out_elems = self.batch * self.out_h * self.out_w * self.c_out
        return out_elems * self.kernel_h * self.kernel_w * (self.c_in // self.groups)

    @property
    def weight_params(self) -> int:
        weights = self.kernel_h * self.kernel_w * (self.c_in // self.groups) * self.c_out
        return weights + (self.c_out if self.has_bias else 0)
