"""
Training-time RepVGG block: parallel 3x3+BN, 1x1+BN and optional identity BN
branches, summed, then ReLU. Ablated blocks may omit the 1x1 branch or the
identity branch.
"""

from dataclasses import dataclass

import numpy as np

from repvgg_reparam.common import (
    DEFAULT_BN_EPS,
    BnParams,
    ConvParams,
    ShapeError,
    ValidationError,
)
from repvgg_reparam.tensor_ops import batch_norm_infer, ensure_tensor4, relu
from repvgg_reparam.winograd import conv2d_with_algorithm


@dataclass(frozen=True, eq=False)
class RepVggBlock:
    """
    Three-branch block. The identity branch exists exactly when the block keeps
    its shape (stride 1, in_channels == out_channels) and use_identity is set;
    the structure is fixed at construction time. conv1 and bn1 are both None
    in a block without the 1x1 branch.
    """

    conv3: ConvParams
    bn3: BnParams
    conv1: ConvParams | None
    bn1: BnParams | None
    bn_id: BnParams | None = None
    use_identity: bool = True

    def __post_init__(self):
        c3, c1 = self.conv3, self.conv1
        if c3.kernel_size != 3 or c3.padding != 1:
            raise ValidationError(
                f"3x3 branch must be a 3x3 conv with padding 1, got "
                f"{c3.kernel_size}x{c3.kernel_size} padding {c3.padding}"
            )
        if c3.bias is not None:
            raise ValidationError("Branch convolutions must not carry a bias")
        if (c1 is None) != (self.bn1 is None):
            raise ValidationError("1x1 conv and its BN must be both present or both absent")
        if c1 is not None:
            self._check_1x1(c1)
        for name, bn in (("bn3", self.bn3), ("bn1", self.bn1), ("bn_id", self.bn_id)):
            if bn is not None and bn.channels != c3.out_channels:
                raise ShapeError(
                    f"{name} has {bn.channels} channels, block has {c3.out_channels} outputs"
                )
        expected = self.identity_eligible and self.use_identity
        if (self.bn_id is not None) != expected:
            raise ValidationError(
                f"Identity branch must be present iff stride == 1, in == out channels "
                f"and the identity branch is enabled (stride {self.stride}, "
                f"{self.in_channels}->{self.out_channels}, "
                f"{'enabled' if self.use_identity else 'disabled'}, "
                f"identity {'present' if self.bn_id is not None else 'absent'})"
            )

    def _check_1x1(self, c1: ConvParams):
        c3 = self.conv3
        if c1.kernel_size != 1 or c1.padding != c3.padding - 1:
            raise ValidationError(
                f"1x1 branch must be a 1x1 conv with padding {c3.padding - 1}, got "
                f"{c1.kernel_size}x{c1.kernel_size} padding {c1.padding}"
            )
        if c1.stride != c3.stride:
            raise ValidationError(
                f"Branch strides differ: 3x3 has {c3.stride}, 1x1 has {c1.stride}"
            )
        if c1.groups != c3.groups:
            raise ValidationError(
                f"Branch groups differ: 3x3 has {c3.groups}, 1x1 has {c1.groups}"
            )
        if c1.bias is not None:
            raise ValidationError("Branch convolutions must not carry a bias")
        if (c1.in_channels, c1.out_channels) != (c3.in_channels, c3.out_channels):
            raise ShapeError(
                f"Branch channels differ: 3x3 is {c3.in_channels}->{c3.out_channels}, "
                f"1x1 is {c1.in_channels}->{c1.out_channels}"
            )

    @property
    def stride(self) -> int:
        return self.conv3.stride

    @property
    def groups(self) -> int:
        return self.conv3.groups

    @property
    def in_channels(self) -> int:
        return self.conv3.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv3.out_channels

    @property
    def identity_eligible(self) -> bool:
        return has_identity_branch(self.in_channels, self.out_channels, self.stride)

    @property
    def has_identity(self) -> bool:
        return self.bn_id is not None

    @property
    def has_1x1(self) -> bool:
        return self.conv1 is not None

    @property
    def num_branches(self) -> int:
        return 1 + int(self.has_1x1) + int(self.has_identity)

    @property
    def num_scalars(self) -> int:
        total = self.conv3.num_scalars + self.bn3.num_scalars
        if self.conv1 is not None:
            total += self.conv1.num_scalars + self.bn1.num_scalars
        if self.bn_id is not None:
            total += self.bn_id.num_scalars
        return total


def has_identity_branch(in_channels: int, out_channels: int, stride: int) -> bool:
    return stride == 1 and in_channels == out_channels


def init_block(
    in_channels: int,
    out_channels: int,
    stride: int = 1,
    groups: int = 1,
    rng: np.random.Generator | None = None,
    dtype="float32",
    eps: float = DEFAULT_BN_EPS,
    use_1x1: bool = True,
    use_identity: bool = True,
) -> RepVggBlock:
    """
    Create a block with He-style uniform kernels and default BN statistics.

    Kernels are drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in)) with
    fan_in = in_channels/groups * k * k. BN starts at gamma=1, beta=0, mu=0, var=1.

    Args:
        in_channels: Input channel count
        out_channels: Output channel count
        stride: 1 or 2 in practice
        groups: Group count shared by both conv branches
        rng: numpy Generator; a fresh default_rng(0) if omitted
        dtype: Parameter dtype
        eps: BN epsilon
        use_1x1: Build the 1x1 branch
        use_identity: Build the identity branch where the shape allows it
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if in_channels % groups or out_channels % groups:
        raise ShapeError(
            f"Channels {in_channels}->{out_channels} not divisible by groups ({groups})"
        )
    cg = in_channels // groups

    def kernel(k):
        bound = np.sqrt(6.0 / (cg * k * k))
        return rng.uniform(-bound, bound, size=(out_channels, cg, k, k)).astype(dtype)

    def bn():
        return BnParams(
            mu=np.zeros(out_channels, dtype=dtype),
            var=np.ones(out_channels, dtype=dtype),
            gamma=np.ones(out_channels, dtype=dtype),
            beta=np.zeros(out_channels, dtype=dtype),
            eps=eps,
        )

    conv3 = ConvParams(kernel(3), stride=stride, padding=1, groups=groups)
    # the 1x1 kernel is always drawn so later draws do not depend on use_1x1
    kernel1 = kernel(1)
    conv1 = ConvParams(kernel1, stride=stride, padding=0, groups=groups) if use_1x1 else None
    identity = use_identity and has_identity_branch(in_channels, out_channels, stride)
    return RepVggBlock(
        conv3=conv3,
        bn3=bn(),
        conv1=conv1,
        bn1=bn() if use_1x1 else None,
        bn_id=bn() if identity else None,
        use_identity=use_identity,
    )


def block_branches(block: RepVggBlock, x, algorithm: str = "direct") -> list[np.ndarray]:
    """Per-branch outputs before the sum: [3x3+BN(, 1x1+BN)(, identity BN)]."""
    x = ensure_tensor4(x)
    if x.shape[1] != block.in_channels:
        raise ShapeError(
            f"Block expects {block.in_channels} input channels, got {x.shape[1]}"
        )
    outputs = [batch_norm_infer(conv2d_with_algorithm(x, block.conv3, algorithm), block.bn3)]
    if block.conv1 is not None:
        outputs.append(batch_norm_infer(conv2d_with_algorithm(x, block.conv1, "direct"), block.bn1))
    if block.bn_id is not None:
        outputs.append(batch_norm_infer(x, block.bn_id))
    return outputs


def block_forward_train(block: RepVggBlock, x, algorithm: str = "direct") -> np.ndarray:
    """relu(bn3(conv3(x)) [+ bn1(conv1(x))] [+ bn_id(x)]) with inference-mode BN."""
    branches = block_branches(block, x, algorithm)
    out = branches[0]
    for branch in branches[1:]:
        out = out + branch
    return relu(out)


def block_forward_deploy(fused: ConvParams, x, algorithm: str = "direct") -> np.ndarray:
    """relu(conv2d(x, fused)) for a converted 3x3 conv with bias."""
    if fused.kernel_size != 3 or fused.bias is None:
        raise ValidationError(
            f"Deploy block needs a 3x3 conv with bias, got "
            f"{fused.kernel_size}x{fused.kernel_size} "
            f"{'with' if fused.bias is not None else 'without'} bias"
        )
    return relu(conv2d_with_algorithm(x, fused, algorithm))
