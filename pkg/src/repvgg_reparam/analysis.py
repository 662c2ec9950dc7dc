"""
Analytic cost models over a ModelSpec: parameters, theoretical FLOPs, Winograd
multiplies, peak activation memory and implicit-ensemble size.

A multiply-add counts as one FLOP. ReLU, pooling and BN contribute no FLOPs.
"""

from dataclasses import dataclass, field

from repvgg_reparam.arch import MODES, ModelSpec
from repvgg_reparam.common import (
    DEFAULT_INPUT_RESOLUTION,
    LayerCost,
    ValidationError,
)
from repvgg_reparam.tensor_ops import conv_output_size
from repvgg_reparam.winograd import wino_mul_count

BYTES_PER_SCALAR = 4


def _check_mode(mode: str):
    if mode not in MODES:
        raise ValidationError(
            f"Unknown mode '{mode}'. Valid options are: {', '.join(MODES)}."
        )


def _check_resolution(spec: ModelSpec, input_res: int):
    if input_res < spec.min_input_size:
        raise ValidationError(
            f"Input resolution {input_res} is below the minimum {spec.min_input_size} "
            f"for {spec.num_stages} stages"
        )


def layer_costs(
    spec: ModelSpec,
    input_res: int = DEFAULT_INPUT_RESOLUTION,
    mode: str = "deploy",
    batch: int = 1,
) -> list[LayerCost]:
    """
    Per-conv cost entries in forward order, classifier last.

    Deploy mode has one biased 3x3 conv per block. Train mode has a bias-free
    3x3 and, unless ablated, a bias-free 1x1 conv per block; BN is accounted
    for in count_params.
    """
    _check_mode(mode)
    _check_resolution(spec, input_res)
    costs = []
    h = w = input_res
    for plan in spec.layer_plan():
        h = conv_output_size(h, 3, plan.stride, 1)
        w = conv_output_size(w, 3, plan.stride, 1)
        kernels = (3, 1) if mode == "train" and plan.use_1x1 else (3,)
        for k in kernels:
            costs.append(
                LayerCost(
                    layer_index=plan.index,
                    stage=plan.stage,
                    c_in=plan.in_channels,
                    c_out=plan.out_channels,
                    kernel_h=k,
                    kernel_w=k,
                    stride=plan.stride,
                    groups=plan.groups,
                    out_h=h,
                    out_w=w,
                    mode=mode,
                    kind="conv",
                    has_bias=mode == "deploy",
                    batch=batch,
                )
            )
    costs.append(
        LayerCost(
            layer_index=spec.num_layers + 1,
            stage=spec.num_stages + 1,
            c_in=spec.widths[-1],
            c_out=spec.num_classes,
            kernel_h=1,
            kernel_w=1,
            stride=1,
            groups=1,
            out_h=1,
            out_w=1,
            mode=mode,
            kind="fc",
            has_bias=True,
            batch=batch,
        )
    )
    return costs


def count_params(spec: ModelSpec, mode: str = "deploy") -> int:
    """
    Stored scalars of the model.

    Deploy: kH*kW*cIn/g*cOut + cOut per fused conv, plus the classifier.
    Train: both branch kernels without bias, 4 values (mu, var, gamma, beta) per
    channel of every BN, plus the classifier.
    """
    total = sum(c.weight_params for c in layer_costs(spec, spec.min_input_size, mode))
    if mode == "train":
        for plan in spec.layer_plan():
            total += plan.num_branches * 4 * plan.out_channels
    return total


def count_flops(
    spec: ModelSpec, input_res: int = DEFAULT_INPUT_RESOLUTION, mode: str = "deploy"
) -> int:
    return sum(c.direct_muls for c in layer_costs(spec, input_res, mode))


def count_wino_muls(
    spec: ModelSpec, input_res: int = DEFAULT_INPUT_RESOLUTION, mode: str = "deploy"
) -> int:
    return sum(wino_mul_count(c) for c in layer_costs(spec, input_res, mode))


def block_peak_bytes(input_bytes: int, branches: list[list[int]]) -> int:
    """
    Peak live activation bytes while evaluating one block.

    Branches run one after another and each finished branch output stays live
    until the final sum. Inside a branch an op needs its predecessor's output
    and its own. An empty branch is a shortcut and allocates nothing. The block
    input stays live throughout.

    Args:
        input_bytes: Size of the block input
        branches: Output sizes of the ops of every branch, in order

    Returns:
        Peak bytes including the input
    """
    peak = input_bytes
    finished = 0
    for ops in branches:
        previous = 0
        for out in ops:
            peak = max(peak, input_bytes + finished + previous + out)
            previous = out
        finished += previous
    return peak


def peak_memory(
    spec: ModelSpec,
    input_res: int = DEFAULT_INPUT_RESOLUTION,
    mode: str = "deploy",
    batch: int = 1,
    bytes_per_scalar: int = BYTES_PER_SCALAR,
) -> int:
    """
    Maximum over blocks of block_peak_bytes; parameters are not counted.

    A deploy block is one conv. A train block has one branch per conv plus the
    identity BN, each producing a full-size output.
    """
    _check_mode(mode)
    _check_resolution(spec, input_res)
    peak = 0
    h = w = input_res
    for plan in spec.layer_plan():
        in_bytes = batch * plan.in_channels * h * w * bytes_per_scalar
        h = conv_output_size(h, 3, plan.stride, 1)
        w = conv_output_size(w, 3, plan.stride, 1)
        out_bytes = batch * plan.out_channels * h * w * bytes_per_scalar
        if mode == "deploy":
            branches = [[out_bytes]]
        else:
            branches = [[out_bytes]] * plan.num_branches
        peak = max(peak, block_peak_bytes(in_bytes, branches))
    return peak


def ensemble_size(spec: ModelSpec, stage: int | None = None) -> int:
    """
    Implicit-ensemble member count: the product over blocks of the branch count,
    3 when the block has an identity branch and 2 otherwise for a full spec.
    `stage` (1-based) restricts the product to one stage.
    """
    if stage is not None and not 1 <= stage <= spec.num_stages:
        raise ValidationError(f"Stage {stage} outside 1..{spec.num_stages}")
    size = 1
    for plan in spec.layer_plan():
        if stage is None or plan.stage == stage:
            size *= plan.num_branches
    return size


@dataclass(frozen=True)
class CostRow:
    layer: LayerCost
    params: int
    flops: int
    wino_muls: int


@dataclass
class CostReport:
    spec_name: str
    input_res: int
    batch: int
    rows: list[CostRow] = field(default_factory=list)
    total_params: int = 0
    total_flops: int = 0
    total_wino_muls: int = 0
    train_params: int = 0
    peak_memory_train: int = 0
    peak_memory_deploy: int = 0
    ensemble_size: int = 1

    @property
    def ensemble_size_str(self) -> str:
        return str(self.ensemble_size)

    @property
    def ensemble_size_sci(self) -> str:
        return f"{float(self.ensemble_size):.2e}"


def build_cost_report(
    spec: ModelSpec, input_res: int = DEFAULT_INPUT_RESOLUTION, batch: int = 1
) -> CostReport:
    """Deploy-mode per-layer costs with totals, memory and ensemble figures."""
    rows = [
        CostRow(
            layer=c,
            params=c.weight_params,
            flops=c.direct_muls,
            wino_muls=wino_mul_count(c),
        )
        for c in layer_costs(spec, input_res, "deploy", batch)
    ]
    return CostReport(
        spec_name=spec.name,
        input_res=input_res,
        batch=batch,
        rows=rows,
        total_params=sum(r.params for r in rows),
        total_flops=sum(r.flops for r in rows),
        total_wino_muls=sum(r.wino_muls for r in rows),
        train_params=count_params(spec, "train"),
        peak_memory_train=peak_memory(spec, input_res, "train", batch),
        peak_memory_deploy=peak_memory(spec, input_res, "deploy", batch),
        ensemble_size=ensemble_size(spec),
    )
