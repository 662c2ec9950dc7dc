"""
Desk-scale training of train-mode models with hand-written backprop.

Training BN normalizes with batch statistics and folds them into the running
statistics by exponential moving average. Evaluation and conversion use the
running statistics only.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from repvgg_reparam.arch import Layer, Model, forward, model_from_state, model_state
from repvgg_reparam.block import RepVggBlock, block_forward_train
from repvgg_reparam.common import (
    BnParams,
    ConvParams,
    ModeError,
    ShapeError,
    TrainingDivergedError,
    ValidationError,
)
from repvgg_reparam.tensor_ops import (
    col2im,
    conv2d,
    conv_output_size,
    ensure_tensor4,
    im2col,
)

DEFAULT_BN_MOMENTUM = 0.1


@dataclass
class TrainConfig:
    """
    SGD with momentum. Weight decay applies to conv kernels and the classifier
    weight only; BN parameters and biases are never decayed.
    """

    learning_rate: float = 0.05
    cosine: bool = True
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    bn_momentum: float = DEFAULT_BN_MOMENTUM

    def __post_init__(self):
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValidationError(
                f"Learning rate must be a finite non-negative number, got {self.learning_rate}"
            )
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"Momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValidationError(f"Weight decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 1:
            raise ValidationError(f"Epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"Batch size must be at least 1, got {self.batch_size}")
        if not 0 < self.bn_momentum <= 1:
            raise ValidationError(f"BN momentum must be in (0, 1], got {self.bn_momentum}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during `epoch` (1-based); cosine-annealed when enabled."""
        if not self.cosine:
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / self.epochs))


@dataclass(frozen=True, eq=False)
class ToyDataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int

    def __post_init__(self):
        ensure_tensor4(self.inputs, "dataset inputs")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError(
                f"{self.inputs.shape[0]} inputs but labels have shape {self.labels.shape}"
            )

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


def make_toy_splits(
    num_classes: int = 4,
    train_size: int = 128,
    val_size: int = 64,
    size: int = 32,
    channels: int = 3,
    seed: int = 0,
    noise: float = 0.3,
    dtype="float64",
) -> tuple[ToyDataset, ToyDataset]:
    """
    Synthetic classification data: each class has a base color and an oriented
    stripe texture; examples add a random phase and Gaussian noise.

    Class prototypes depend on `seed` only, so both splits share them.
    """
    if num_classes < 2:
        raise ValidationError(f"Need at least 2 classes, got {num_classes}")
    proto = np.random.default_rng(seed)
    colors = proto.uniform(-1.0, 1.0, size=(num_classes, channels))
    coords = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    def split(name, count, rng):
        labels = np.arange(count) % num_classes
        rng.shuffle(labels)
        images = np.empty((count, channels, size, size), dtype=np.float64)
        for i, label in enumerate(labels):
            angle = math.pi * label / num_classes
            freq = 2 * math.pi / (4 + 2 * label)
            phase = rng.uniform(0, 2 * math.pi)
            stripes = np.cos(freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
            images[i] = colors[label][:, None, None] + 0.5 * stripes[None]
        images += noise * rng.standard_normal(images.shape)
        return ToyDataset(images.astype(dtype), labels.astype(np.int64), name, num_classes)

    return (
        split("train", train_size, np.random.default_rng(seed + 1)),
        split("validation", val_size, np.random.default_rng(seed + 2)),
    )


# Forward/backward pieces


def _conv_forward(x, p: ConvParams):
    n = x.shape[0]
    g = p.groups
    k = p.kernel_size
    out_h = conv_output_size(x.shape[2], k, p.stride, p.padding)
    out_w = conv_output_size(x.shape[3], k, p.stride, p.padding)
    cols = im2col(x, k, p.stride, p.padding, g)
    w = p.kernel.reshape(g, p.out_channels // g, -1)
    out = np.matmul(cols, w.transpose(0, 2, 1))
    out = out.transpose(0, 1, 3, 2).reshape(n, p.out_channels, out_h, out_w)
    return out, (cols, x.shape)


def _conv_backward(dout, p: ConvParams, cache):
    cols, x_shape = cache
    n = dout.shape[0]
    g = p.groups
    w = p.kernel.reshape(g, p.out_channels // g, -1)
    dy = dout.reshape(n, g, p.out_channels // g, -1)
    dkernel = np.matmul(dy, cols).sum(axis=0).reshape(p.kernel.shape)
    dcols = np.matmul(dy.transpose(0, 1, 3, 2), w)
    dx = col2im(dcols, x_shape, p.kernel_size, p.stride, p.padding, g)
    return dx, dkernel


def _bn_forward(x, bn: BnParams):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = bn.gamma[None, :, None, None] * xhat + bn.beta[None, :, None, None]
    return y, (xhat, inv_std, mean, var)


def _bn_backward(dy, bn: BnParams, cache):
    xhat, inv_std, _, _ = cache
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dxhat = dy * bn.gamma[None, :, None, None]
    dx = (inv_std / m)[None, :, None, None] * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dx, dgamma, dbeta


def _running_update(prefix, bn: BnParams, cache, count, momentum):
    _, _, mean, var = cache
    unbiased = var * count / (count - 1) if count > 1 else var
    return {
        f"{prefix}.mu": (1 - momentum) * bn.mu + momentum * mean,
        f"{prefix}.var": (1 - momentum) * bn.var + momentum * unbiased,
    }


def _softmax_cross_entropy(logits, labels):
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1
    return loss, dlogits / n


@dataclass
class BackwardResult:
    loss: float
    logits: np.ndarray
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    running_stats: dict[str, np.ndarray] = field(default_factory=dict)


def _check_batch(model: Model, inputs, labels):
    if model.mode != "train":
        raise ModeError(f"Training needs a train-mode model, {model.spec.name} is {model.mode}")
    x = ensure_tensor4(inputs).astype(model.dtype, copy=False)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"{x.shape[0]} inputs but labels have shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= model.spec.num_classes):
        raise ValidationError(
            f"Labels must lie in [0, {model.spec.num_classes}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    if x.shape[1] != model.spec.input_channels:
        raise ShapeError(
            f"Model expects {model.spec.input_channels} input channels, got {x.shape[1]}"
        )
    return x, labels


def backward(
    model: Model,
    inputs,
    labels,
    bn_momentum: float = DEFAULT_BN_MOMENTUM,
    need_grads: bool = True,
) -> BackwardResult:
    """
    Training-mode forward and reverse pass for one batch.

    Args:
        model: Train-mode model
        inputs: Batch (n, c, h, w)
        labels: Class indices (n,)
        bn_momentum: EMA weight of the batch statistics in the running update
        need_grads: Skip the reverse pass when False

    Returns:
        BackwardResult with the mean cross-entropy loss, gradients keyed like
        model_state for every learnable tensor, and the updated running stats

    Raises:
        ModeError: model is in deploy mode
    """
    x, labels = _check_batch(model, inputs, labels)
    result = BackwardResult(loss=0.0, logits=np.empty(0))
    caches = []
    h = x
    for layer in model.layers:
        block: RepVggBlock = layer.op
        prefix = f"layers.{layer.index}"
        y3, c3 = _conv_forward(h, block.conv3)
        total, b3 = _bn_forward(y3, block.bn3)
        count = y3.shape[0] * y3.shape[2] * y3.shape[3]
        result.running_stats.update(_running_update(f"{prefix}.bn3", block.bn3, b3, count, bn_momentum))
        c1 = b1 = bid = None
        if block.conv1 is not None:
            y1, c1 = _conv_forward(h, block.conv1)
            z1, b1 = _bn_forward(y1, block.bn1)
            total = total + z1
            result.running_stats.update(
                _running_update(f"{prefix}.bn1", block.bn1, b1, count, bn_momentum)
            )
        if block.bn_id is not None:
            zid, bid = _bn_forward(h, block.bn_id)
            total = total + zid
            result.running_stats.update(
                _running_update(f"{prefix}.bn_id", block.bn_id, bid, count, bn_momentum)
            )
        caches.append((c3, b3, c1, b1, bid, total > 0))
        h = np.maximum(total, 0)

    feat = h.mean(axis=(2, 3))
    head = model.head
    logits = feat @ head.weight.T + head.bias
    result.logits = logits
    result.loss, dlogits = _softmax_cross_entropy(logits, labels)
    if not need_grads:
        return result

    grads = result.grads
    grads["head.weight"] = dlogits.T @ feat
    grads["head.bias"] = dlogits.sum(axis=0)
    spatial = h.shape[2] * h.shape[3]
    dh = np.broadcast_to((dlogits @ head.weight)[:, :, None, None] / spatial, h.shape)

    for layer, (c3, b3, c1, b1, bid, active) in zip(
        reversed(model.layers), reversed(caches), strict=True
    ):
        block = layer.op
        prefix = f"layers.{layer.index}"
        dtotal = np.where(active, dh, 0)
        dy3, grads[f"{prefix}.bn3.gamma"], grads[f"{prefix}.bn3.beta"] = _bn_backward(
            dtotal, block.bn3, b3
        )
        dx, grads[f"{prefix}.conv3.kernel"] = _conv_backward(dy3, block.conv3, c3)
        if block.conv1 is not None:
            dy1, grads[f"{prefix}.bn1.gamma"], grads[f"{prefix}.bn1.beta"] = _bn_backward(
                dtotal, block.bn1, b1
            )
            dx1, grads[f"{prefix}.conv1.kernel"] = _conv_backward(dy1, block.conv1, c1)
            dx = dx + dx1
        if block.bn_id is not None:
            dxid, grads[f"{prefix}.bn_id.gamma"], grads[f"{prefix}.bn_id.beta"] = _bn_backward(
                dtotal, block.bn_id, bid
            )
            dx = dx + dxid
        dh = dx
    return result


def training_loss(model: Model, inputs, labels) -> float:
    """Mean cross-entropy under batch-statistics BN, as minimized by train()."""
    return backward(model, inputs, labels, need_grads=False).loss


def is_decayed(name: str) -> bool:
    return name.endswith(".kernel") or name == "head.weight"


def is_learnable(name: str) -> bool:
    return not (name.endswith(".mu") or name.endswith(".var"))


# Training loop


@dataclass(frozen=True)
class CurveRow:
    epoch: int
    lr: float
    train_loss: float
    val_acc: float


@dataclass
class TrainResult:
    model: Model
    curve: list[CurveRow] = field(default_factory=list)


def evaluate(
    model: Model, dataset: ToyDataset, algorithm: str = "direct", batch_size: int = 256
) -> tuple[float, np.ndarray]:
    """
    Accuracy and predicted classes using running BN statistics (or the fused
    convs of a deploy model).
    """
    preds = []
    for start in range(0, len(dataset), batch_size):
        logits = forward(model, dataset.inputs[start : start + batch_size], algorithm)
        preds.append(np.argmax(logits, axis=1))
    predictions = np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)
    accuracy = float(np.mean(predictions == dataset.labels)) if len(dataset) else 0.0
    return accuracy, predictions


def _batches(count: int, batch_size: int, order: np.ndarray):
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]


def _dataset_loss(model: Model, inputs, labels, batch_size: int) -> float:
    """Mean batch-statistics loss over minibatches taken in dataset order."""
    n = len(labels)
    losses = [
        backward(model, inputs[idx], labels[idx], need_grads=False).loss
        for idx in _batches(n, batch_size, np.arange(n))
    ]
    return float(np.mean(losses))


def train(
    model: Model,
    dataset: ToyDataset,
    config: TrainConfig,
    val_set: ToyDataset | None = None,
) -> TrainResult:
    """
    Minibatch SGD with momentum and optional cosine annealing.

    The curve starts with an epoch-0 row for the untrained model. Every row
    holds the training loss of that epoch's final parameters, measured over the
    training set in a fixed batch order, and the validation accuracy of those
    parameters. An epoch whose learning rate is 0 changes nothing, running BN
    statistics included, so its row repeats the previous one. Deterministic in
    (model, dataset, config).

    Raises:
        ModeError: model is in deploy mode
        TrainingDivergedError: a minibatch loss is not finite; carries the last
            model that finished an epoch with finite losses
    """
    if model.mode != "train":
        raise ModeError(f"Training needs a train-mode model, {model.spec.name} is {model.mode}")
    val_set = val_set if val_set is not None else dataset
    spec = model.spec
    state = {k: np.array(v, dtype=model.dtype) for k, v in model_state(model).items()}
    velocity = {k: np.zeros_like(v) for k, v in state.items() if is_learnable(k)}
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    inputs = dataset.inputs.astype(model.dtype, copy=False)

    val_acc, _ = evaluate(model, val_set)
    initial = _dataset_loss(model, inputs, dataset.labels, config.batch_size)
    curve = [CurveRow(0, config.learning_rate, initial, val_acc)]
    logging.info(f"Epoch 0: loss {curve[0].train_loss:.4f}, val acc {val_acc:.3f}")

    current = model
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        losses = []
        for idx in _batches(n, config.batch_size, rng.permutation(n)):
            step_model = model_from_state(spec, "train", state)
            result = backward(step_model, inputs[idx], dataset.labels[idx], config.bn_momentum)
            if not math.isfinite(result.loss):
                raise TrainingDivergedError(
                    f"Loss became {result.loss} in epoch {epoch}",
                    epoch=epoch,
                    last_finite_model=current,
                )
            losses.append(result.loss)
            if lr == 0:
                continue
            for name, grad in result.grads.items():
                if config.weight_decay and is_decayed(name):
                    grad = grad + config.weight_decay * state[name]
                velocity[name] = config.momentum * velocity[name] + grad
                state[name] = state[name] - lr * velocity[name]
            state.update(result.running_stats)
        updated = model_from_state(spec, "train", state)
        epoch_loss = _dataset_loss(updated, inputs, dataset.labels, config.batch_size)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(
                f"Loss became {epoch_loss} after epoch {epoch}",
                epoch=epoch,
                last_finite_model=current,
            )
        current = updated
        val_acc, _ = evaluate(current, val_set)
        logging.debug(f"Epoch {epoch}: mean minibatch loss during updates {np.mean(losses):.4f}")
        curve.append(CurveRow(epoch, lr, epoch_loss, val_acc))
        logging.info(
            f"Epoch {epoch}/{config.epochs}: lr {lr:.5f}, loss {curve[-1].train_loss:.4f}, "
            f"val acc {val_acc:.3f}"
        )
    return TrainResult(model=current, curve=curve)


def calibrate_bn(model: Model, inputs) -> Model:
    """
    Set every running mean and variance to the batch statistics its BN sees
    when `inputs` flow through the model, layer by layer.
    """
    if model.mode != "train":
        raise ModeError(f"BN calibration needs a train-mode model, {model.spec.name} is {model.mode}")
    h = ensure_tensor4(inputs).astype(model.dtype, copy=False)

    def stats(bn: BnParams, y):
        return dataclasses.replace(
            bn,
            mu=y.mean(axis=(0, 2, 3)).astype(bn.mu.dtype),
            var=y.var(axis=(0, 2, 3)).astype(bn.var.dtype),
        )

    layers = []
    for layer in model.layers:
        block: RepVggBlock = layer.op
        block = dataclasses.replace(
            block,
            bn3=stats(block.bn3, conv2d(h, block.conv3)),
            bn1=None if block.conv1 is None else stats(block.bn1, conv2d(h, block.conv1)),
            bn_id=None if block.bn_id is None else stats(block.bn_id, h),
        )
        layers.append(Layer(index=layer.index, stage=layer.stage, op=block))
        h = block_forward_train(block, h)
    logging.info(f"Calibrated BN statistics of {len(layers)} blocks on {h.shape[0]} inputs")
    return dataclasses.replace(model, layers=tuple(layers))
