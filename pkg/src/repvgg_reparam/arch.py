"""
RepVGG-A/B architecture family: specs, presets, instantiation and forward.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from repvgg_reparam.block import (
    RepVggBlock,
    block_forward_deploy,
    block_forward_train,
    has_identity_branch,
    init_block,
)
from repvgg_reparam.common import (
    DEFAULT_BN_EPS,
    BnParams,
    ConvParams,
    ShapeError,
    ValidationError,
    as_dtype,
)
from repvgg_reparam.reparam import FusedConv
from repvgg_reparam.tensor_ops import ensure_tensor4, fully_connected, global_avg_pool

VARIANT_LAYERS = {
    "A": (1, 2, 4, 14, 1),
    "B": (1, 4, 6, 16, 1),
}
BASE_WIDTHS = (64, 64, 128, 256, 512)
STAGE1_WIDTH_CAP = 64
GROUP_CHOICES = (1, 2, 4)
MODES = ("train", "deploy")

# name -> (variant, a, b, g)
PRESETS = {
    "A0": ("A", 0.75, 2.5, 1),
    "A1": ("A", 1.0, 2.5, 1),
    "A2": ("A", 1.5, 2.75, 1),
    "B0": ("B", 1.0, 2.5, 1),
    "B1": ("B", 2.0, 4.0, 1),
    "B1g2": ("B", 2.0, 4.0, 2),
    "B1g4": ("B", 2.0, 4.0, 4),
    "B2": ("B", 2.5, 5.0, 1),
    "B2g2": ("B", 2.5, 5.0, 2),
    "B2g4": ("B", 2.5, 5.0, 4),
    "B3": ("B", 3.0, 5.0, 1),
    "B3g4": ("B", 3.0, 5.0, 4),
}

BN_FIELDS = ("mu", "var", "gamma", "beta")

# ablation name -> (use_1x1, use_identity)
ABLATIONS = {
    "full": (True, True),
    "no-identity": (True, False),
    "no-1x1": (False, True),
    "plain": (False, False),
}


@dataclass(frozen=True)
class LayerPlan:
    """Static description of one block position derived from a ModelSpec."""

    index: int
    stage: int
    in_channels: int
    out_channels: int
    stride: int
    groups: int
    use_1x1: bool = True
    use_identity: bool = True

    @property
    def has_identity(self) -> bool:
        return self.use_identity and has_identity_branch(
            self.in_channels, self.out_channels, self.stride
        )

    @property
    def num_branches(self) -> int:
        return 1 + int(self.use_1x1) + int(self.has_identity)


@dataclass(frozen=True)
class ModelSpec:
    """
    Architecture description. Layer indices are 1-based and count every block,
    stage 1 included. Stages are 1-based too. use_1x1 and use_identity switch
    the 1x1 and identity branches of every block; both are on for RepVGG proper.
    """

    name: str
    variant: str
    layers_per_stage: tuple[int, ...]
    widths: tuple[int, ...]
    groups: int = 1
    groupwise_layers: tuple[int, ...] = ()
    a: float | None = None
    b: float | None = None
    num_classes: int = 1000
    input_channels: int = 3
    bn_eps: float = DEFAULT_BN_EPS
    use_1x1: bool = True
    use_identity: bool = True

    def __post_init__(self):
        if len(self.layers_per_stage) != len(self.widths) or not self.layers_per_stage:
            raise ValidationError(
                f"Need one width per stage: {len(self.layers_per_stage)} stages, "
                f"{len(self.widths)} widths"
            )
        if any(n <= 0 for n in self.layers_per_stage):
            raise ValidationError(
                f"Every stage needs at least one layer, got {list(self.layers_per_stage)}"
            )
        if any(w <= 0 for w in self.widths):
            raise ValidationError(f"Stage widths must be positive, got {list(self.widths)}")
        if self.groups not in GROUP_CHOICES:
            raise ValidationError(
                f"Group choice must be one of {', '.join(map(str, GROUP_CHOICES))}, "
                f"got {self.groups}"
            )
        if self.num_classes <= 0 or self.input_channels <= 0:
            raise ValidationError(
                f"num_classes and input_channels must be positive, got "
                f"{self.num_classes} and {self.input_channels}"
            )
        if self.bn_eps <= 0:
            raise ValidationError(f"BN eps must be positive, got {self.bn_eps}")
        if self.groups == 1 and self.groupwise_layers:
            raise ValidationError("groupwise_layers given but groups is 1")

        num_layers = sum(self.layers_per_stage)
        firsts = set(stage_first_layers(self.layers_per_stage))
        previous = None
        for index in sorted(self.groupwise_layers):
            if not 1 <= index <= num_layers:
                raise ValidationError(
                    f"Groupwise layer {index} outside 1..{num_layers}"
                )
            if previous is not None and index - previous == 1:
                raise ValidationError(
                    f"Groupwise layers {previous} and {index} are adjacent"
                )
            if index == 1 and self.input_channels % self.groups:
                raise ValidationError(
                    f"Input channels ({self.input_channels}) not divisible by groups "
                    f"({self.groups}) at groupwise layer 1"
                )
            stage = stage_of_layer(self.layers_per_stage, index)
            width = self.widths[stage - 1]
            in_width = self.widths[stage - 2] if index in firsts and stage > 1 else width
            if width % self.groups or (index != 1 and in_width % self.groups):
                raise ValidationError(
                    f"Stage {stage} width {width} (layer {index}, input {in_width}) "
                    f"is not divisible by groups {self.groups}"
                )
            previous = index

    @property
    def num_stages(self) -> int:
        return len(self.layers_per_stage)

    @property
    def num_layers(self) -> int:
        return sum(self.layers_per_stage)

    @property
    def min_input_size(self) -> int:
        """Smallest spatial size accepted by forward: 2 ** num_stages."""
        return 2**self.num_stages

    @property
    def branch_names(self) -> tuple[str, ...]:
        names = ["3x3"]
        if self.use_1x1:
            names.append("1x1")
        if self.use_identity:
            names.append("identity")
        return tuple(names)

    def layer_plan(self) -> list[LayerPlan]:
        plan = []
        index = 1
        in_channels = self.input_channels
        groupwise = set(self.groupwise_layers)
        for stage, (count, width) in enumerate(
            zip(self.layers_per_stage, self.widths, strict=True), start=1
        ):
            for position in range(count):
                plan.append(
                    LayerPlan(
                        index=index,
                        stage=stage,
                        in_channels=in_channels,
                        out_channels=width,
                        stride=2 if position == 0 else 1,
                        groups=self.groups if index in groupwise else 1,
                        use_1x1=self.use_1x1,
                        use_identity=self.use_identity,
                    )
                )
                in_channels = width
                index += 1
        return plan

    def to_dict(self) -> dict:
        """Plain-JSON form. Branch flags appear only when a branch is switched off."""
        data = {
            "name": self.name,
            "variant": self.variant,
            "layers_per_stage": list(self.layers_per_stage),
            "widths": list(self.widths),
            "groups": self.groups,
            "groupwise_layers": list(self.groupwise_layers),
            "a": self.a,
            "b": self.b,
            "num_classes": self.num_classes,
            "input_channels": self.input_channels,
            "bn_eps": self.bn_eps,
        }
        if not self.use_1x1:
            data["use_1x1"] = False
        if not self.use_identity:
            data["use_identity"] = False
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        try:
            return cls(
                name=str(data["name"]),
                variant=str(data["variant"]),
                layers_per_stage=tuple(int(n) for n in data["layers_per_stage"]),
                widths=tuple(int(w) for w in data["widths"]),
                groups=int(data["groups"]),
                groupwise_layers=tuple(int(i) for i in data["groupwise_layers"]),
                a=None if data.get("a") is None else float(data["a"]),
                b=None if data.get("b") is None else float(data["b"]),
                num_classes=int(data["num_classes"]),
                input_channels=int(data["input_channels"]),
                bn_eps=float(data["bn_eps"]),
                use_1x1=bool(data.get("use_1x1", True)),
                use_identity=bool(data.get("use_identity", True)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"Malformed model spec: {e}") from e


def stage_first_layers(layers_per_stage) -> list[int]:
    """1-based global index of the first layer of every stage."""
    firsts = []
    index = 1
    for count in layers_per_stage:
        firsts.append(index)
        index += count
    return firsts


def stage_of_layer(layers_per_stage, index: int) -> int:
    end = 0
    for stage, count in enumerate(layers_per_stage, start=1):
        end += count
        if index <= end:
            return stage
    raise ValidationError(f"Layer {index} is beyond the last stage")


def default_groupwise_layers(layers_per_stage) -> tuple[int, ...]:
    """
    Odd layer indices from 3 through the end of the second-to-last stage,
    skipping stage-first layers. For A this is 3..21, for B 3..27.
    """
    if len(layers_per_stage) < 2:
        return ()
    last = sum(layers_per_stage[:-1])
    firsts = set(stage_first_layers(layers_per_stage))
    return tuple(i for i in range(3, last + 1, 2) if i not in firsts)


def _round_width(product: float, groups: int, stage: int) -> int:
    nearest = math.floor(product + 0.5)
    if math.isclose(product, nearest, rel_tol=0, abs_tol=1e-9):
        if nearest % groups:
            raise ValidationError(
                f"Stage {stage} width {nearest} is not divisible by groups {groups}"
            )
        return nearest
    return max(groups, -(-nearest // groups) * groups)


def build_spec(
    variant: str,
    a: float,
    b: float,
    groups: int = 1,
    num_classes: int = 1000,
    name: str | None = None,
    input_channels: int = 3,
    bn_eps: float = DEFAULT_BN_EPS,
) -> ModelSpec:
    """
    Build a RepVGG-A or -B spec from width multipliers.

    Stage widths are [min(64, 64a), 64a, 128a, 256a, 512b]. With groups > 1 the
    odd layers 3..21 (A) or 3..27 (B) become groupwise.

    Args:
        variant: "A" or "B"
        a: Width multiplier of stages 1-4
        b: Width multiplier of stage 5
        groups: Group count of the groupwise layers, one of 1, 2, 4
        num_classes: Classifier outputs
        name: Display name; derived from the arguments when omitted

    Raises:
        ValidationError: bad variant, non-positive multiplier, bad group choice,
            or a stage width that cannot be split into groups
    """
    if variant not in VARIANT_LAYERS:
        raise ValidationError(
            f"Unknown variant '{variant}'. Valid options are: {', '.join(VARIANT_LAYERS)}."
        )
    if a <= 0 or b <= 0:
        raise ValidationError(f"Width multipliers must be positive, got a={a} b={b}")
    if groups not in GROUP_CHOICES:
        raise ValidationError(
            f"Group choice must be one of {', '.join(map(str, GROUP_CHOICES))}, got {groups}"
        )
    layers = VARIANT_LAYERS[variant]
    groupwise = default_groupwise_layers(layers) if groups > 1 else ()
    grouped_stages = {stage_of_layer(layers, i) for i in groupwise}
    products = [
        min(STAGE1_WIDTH_CAP, BASE_WIDTHS[0] * a),
        BASE_WIDTHS[1] * a,
        BASE_WIDTHS[2] * a,
        BASE_WIDTHS[3] * a,
        BASE_WIDTHS[4] * b,
    ]
    widths = tuple(
        _round_width(p, groups if stage in grouped_stages else 1, stage)
        for stage, p in enumerate(products, start=1)
    )
    if name is None:
        name = f"RepVGG-{variant}(a={a:g},b={b:g}" + (f",g={groups})" if groups > 1 else ")")
    return ModelSpec(
        name=name,
        variant=variant,
        layers_per_stage=layers,
        widths=widths,
        groups=groups,
        groupwise_layers=groupwise,
        a=float(a),
        b=float(b),
        num_classes=num_classes,
        input_channels=input_channels,
        bn_eps=bn_eps,
    )


def build_preset(name: str, num_classes: int = 1000) -> ModelSpec:
    if name not in PRESETS:
        raise ValidationError(
            f"Unknown preset '{name}'. Valid options are: {', '.join(PRESETS)}."
        )
    variant, a, b, groups = PRESETS[name]
    return build_spec(variant, a, b, groups, num_classes=num_classes, name=name)


def build_custom_spec(
    layers_per_stage,
    widths,
    groups: int = 1,
    groupwise_layers=None,
    num_classes: int = 10,
    input_channels: int = 3,
    name: str = "custom",
    bn_eps: float = DEFAULT_BN_EPS,
) -> ModelSpec:
    """
    Spec with arbitrary stage depths and widths under the same block rules.

    When groups > 1 and groupwise_layers is omitted the odd-index rule of
    default_groupwise_layers applies.
    """
    layers_per_stage = tuple(int(n) for n in layers_per_stage)
    if groupwise_layers is None:
        groupwise_layers = default_groupwise_layers(layers_per_stage) if groups > 1 else ()
    return ModelSpec(
        name=name,
        variant="custom",
        layers_per_stage=layers_per_stage,
        widths=tuple(int(w) for w in widths),
        groups=groups,
        groupwise_layers=tuple(groupwise_layers),
        num_classes=num_classes,
        input_channels=input_channels,
        bn_eps=bn_eps,
    )


def ablate(spec: ModelSpec, ablation: str) -> ModelSpec:
    """
    Same architecture with the branch set of `ablation`: full, no-identity,
    no-1x1 or plain (3x3 only). The deploy-mode model is identical in shape.
    """
    if ablation not in ABLATIONS:
        raise ValidationError(
            f"Unknown ablation '{ablation}'. Valid options are: {', '.join(ABLATIONS)}."
        )
    use_1x1, use_identity = ABLATIONS[ablation]
    name = spec.name if ablation == "full" else f"{spec.name}[{ablation}]"
    return dataclasses.replace(spec, name=name, use_1x1=use_1x1, use_identity=use_identity)


# Model


@dataclass(frozen=True, eq=False)
class Layer:
    """One block position: a RepVggBlock in train mode, a FusedConv in deploy mode."""

    index: int
    stage: int
    op: RepVggBlock | FusedConv

    @property
    def stride(self) -> int:
        return self.op.stride

    @property
    def groups(self) -> int:
        return self.op.groups

    @property
    def in_channels(self) -> int:
        return self.op.in_channels

    @property
    def out_channels(self) -> int:
        return self.op.out_channels

    @property
    def num_scalars(self) -> int:
        return self.op.num_scalars


@dataclass(frozen=True, eq=False)
class Head:
    """Global average pool followed by a fully-connected classifier."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"Head weight {self.weight.shape} and bias {self.bias.shape} do not match"
            )

    @property
    def num_scalars(self) -> int:
        return int(self.weight.size + self.bias.size)


@dataclass(frozen=True, eq=False)
class Model:
    spec: ModelSpec
    mode: str
    layers: tuple[Layer, ...]
    head: Head

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(
                f"Unknown model mode '{self.mode}'. Valid options are: {', '.join(MODES)}."
            )
        object.__setattr__(self, "layers", tuple(self.layers))
        expected = RepVggBlock if self.mode == "train" else FusedConv
        for layer in self.layers:
            if not isinstance(layer.op, expected):
                raise ValidationError(
                    f"Layer {layer.index} holds {type(layer.op).__name__}, "
                    f"expected {expected.__name__} in {self.mode} mode"
                )

    @property
    def dtype(self) -> np.dtype:
        return self.head.weight.dtype

    @property
    def num_scalars(self) -> int:
        return sum(layer.num_scalars for layer in self.layers) + self.head.num_scalars


def count_scalars(model: Model) -> int:
    """Number of stored scalars, BN statistics included."""
    return model.num_scalars


def instantiate(spec: ModelSpec, seed: int = 0, dtype="float32") -> Model:
    """
    Randomly initialized train-mode model, deterministic in `seed`.

    Kernels use a He-style uniform bound sqrt(6/fan_in), the classifier uses
    1/sqrt(fan_in); BN starts at gamma=1, beta=0, mu=0, var=1.
    """
    dt = as_dtype(str(np.dtype(dtype)))
    rng = np.random.default_rng(seed)
    layers = []
    for plan in spec.layer_plan():
        block = init_block(
            plan.in_channels,
            plan.out_channels,
            stride=plan.stride,
            groups=plan.groups,
            rng=rng,
            dtype=dt,
            eps=spec.bn_eps,
            use_1x1=plan.use_1x1,
            use_identity=plan.use_identity,
        )
        layers.append(Layer(index=plan.index, stage=plan.stage, op=block))
    features = spec.widths[-1]
    bound = 1.0 / np.sqrt(features)
    head = Head(
        weight=rng.uniform(-bound, bound, size=(spec.num_classes, features)).astype(dt),
        bias=rng.uniform(-bound, bound, size=spec.num_classes).astype(dt),
    )
    model = Model(spec=spec, mode="train", layers=tuple(layers), head=head)
    logging.info(
        f"Instantiated {spec.name} ({len(layers)} blocks, seed {seed}, {dt.name}): "
        f"{model.num_scalars:,} stored scalars"
    )
    return model


def _check_input(model: Model, x) -> np.ndarray:
    x = ensure_tensor4(x)
    if x.shape[1] != model.spec.input_channels:
        raise ShapeError(
            f"Model expects {model.spec.input_channels} input channels, got {x.shape[1]}"
        )
    min_size = model.spec.min_input_size
    if min(x.shape[2], x.shape[3]) < min_size:
        raise ShapeError(
            f"Input {x.shape[2]}x{x.shape[3]} is too small for {model.spec.num_stages} "
            f"stride-2 stages; need at least {min_size}x{min_size}"
        )
    return x.astype(model.dtype, copy=False)


def run_layer(layer: Layer, x: np.ndarray, algorithm: str = "direct") -> np.ndarray:
    if isinstance(layer.op, RepVggBlock):
        return block_forward_train(layer.op, x, algorithm)
    return block_forward_deploy(layer.op, x, algorithm)


def stage_outputs(model: Model, x, algorithm: str = "direct") -> list[np.ndarray]:
    """Activations at the end of every stage, in stage order."""
    x = _check_input(model, x)
    outputs = []
    for i, layer in enumerate(model.layers):
        x = run_layer(layer, x, algorithm)
        last_in_stage = i + 1 == len(model.layers) or model.layers[i + 1].stage != layer.stage
        if last_in_stage:
            outputs.append(x)
    return outputs


def forward(model: Model, x, algorithm: str = "direct") -> np.ndarray:
    """
    Logits for a batch.

    Args:
        model: Train- or deploy-mode model
        x: Input (n, input_channels, h, w) with h, w >= 2 ** num_stages
        algorithm: Convolution algorithm for 3x3 layers: direct, winograd or auto

    Returns:
        (n, num_classes) logits in the model dtype
    """
    x = _check_input(model, x)
    for layer in model.layers:
        x = run_layer(layer, x, algorithm)
    return fully_connected(global_avg_pool(x), model.head.weight, model.head.bias)


# State dict


def _bn_state(prefix: str, bn: BnParams) -> dict[str, np.ndarray]:
    return {f"{prefix}.{name}": getattr(bn, name) for name in BN_FIELDS}


def model_state(model: Model) -> dict[str, np.ndarray]:
    """Flat name -> array mapping of every stored tensor, in layer order."""
    state: dict[str, np.ndarray] = {}
    for layer in model.layers:
        prefix = f"layers.{layer.index}"
        op = layer.op
        if isinstance(op, RepVggBlock):
            state[f"{prefix}.conv3.kernel"] = op.conv3.kernel
            state.update(_bn_state(f"{prefix}.bn3", op.bn3))
            if op.conv1 is not None:
                state[f"{prefix}.conv1.kernel"] = op.conv1.kernel
                state.update(_bn_state(f"{prefix}.bn1", op.bn1))
            if op.bn_id is not None:
                state.update(_bn_state(f"{prefix}.bn_id", op.bn_id))
        else:
            state[f"{prefix}.fused.kernel"] = op.kernel
            state[f"{prefix}.fused.bias"] = op.bias
    state["head.weight"] = model.head.weight
    state["head.bias"] = model.head.bias
    return state


def model_from_state(spec: ModelSpec, mode: str, state: dict[str, np.ndarray]) -> Model:
    """
    Rebuild a model from model_state output. Strides, padding and groups come
    from the spec; every tensor named by the spec must be present and no others.

    Raises:
        ValidationError: missing or unexpected tensors, unknown mode
        ShapeError: a tensor has the wrong shape for its position
    """
    if mode not in MODES:
        raise ValidationError(
            f"Unknown model mode '{mode}'. Valid options are: {', '.join(MODES)}."
        )
    used: set[str] = set()

    def take(name):
        if name not in state:
            raise ValidationError(f"Missing tensor '{name}'")
        used.add(name)
        return state[name]

    def bn(prefix):
        return BnParams(**{n: take(f"{prefix}.{n}") for n in BN_FIELDS}, eps=spec.bn_eps)

    layers = []
    for plan in spec.layer_plan():
        prefix = f"layers.{plan.index}"
        if mode == "train":
            conv1 = bn1 = None
            if plan.use_1x1:
                conv1 = ConvParams(
                    take(f"{prefix}.conv1.kernel"),
                    stride=plan.stride,
                    padding=0,
                    groups=plan.groups,
                )
                bn1 = bn(f"{prefix}.bn1")
            op = RepVggBlock(
                conv3=ConvParams(
                    take(f"{prefix}.conv3.kernel"),
                    stride=plan.stride,
                    padding=1,
                    groups=plan.groups,
                ),
                bn3=bn(f"{prefix}.bn3"),
                conv1=conv1,
                bn1=bn1,
                bn_id=bn(f"{prefix}.bn_id") if plan.has_identity else None,
                use_identity=plan.use_identity,
            )
        else:
            op = FusedConv(
                kernel=take(f"{prefix}.fused.kernel"),
                bias=take(f"{prefix}.fused.bias"),
                stride=plan.stride,
                padding=1,
                groups=plan.groups,
            )
        if (op.in_channels, op.out_channels) != (plan.in_channels, plan.out_channels):
            raise ShapeError(
                f"Layer {plan.index} is {op.in_channels}->{op.out_channels}, "
                f"spec says {plan.in_channels}->{plan.out_channels}"
            )
        layers.append(Layer(index=plan.index, stage=plan.stage, op=op))

    head = Head(weight=take("head.weight"), bias=take("head.bias"))
    if head.weight.shape != (spec.num_classes, spec.widths[-1]):
        raise ShapeError(
            f"Head weight {head.weight.shape}, spec needs "
            f"{(spec.num_classes, spec.widths[-1])}"
        )
    extra = sorted(set(state) - used)
    if extra:
        raise ValidationError(f"Unexpected tensors: {', '.join(extra)}")
    return Model(spec=spec, mode=mode, layers=tuple(layers), head=head)
