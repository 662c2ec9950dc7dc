"""
Branch ablation: train one architecture with and without its 1x1 and identity
branches, then compare validation accuracy in train mode and after conversion.
"""

import logging
from dataclasses import dataclass

from repvgg_reparam.analysis import count_params
from repvgg_reparam.arch import ABLATIONS, ModelSpec, ablate, instantiate
from repvgg_reparam.common import ValidationError
from repvgg_reparam.reparam import convert_model
from repvgg_reparam.trainer import ToyDataset, TrainConfig, evaluate, train


@dataclass(frozen=True)
class AblationRow:
    ablation: str
    branches: str
    train_params: int
    deploy_params: int
    train_loss: float
    val_acc: float
    deploy_acc: float


def run_ablation(
    spec: ModelSpec,
    train_set: ToyDataset,
    val_set: ToyDataset,
    config: TrainConfig,
    ablations=None,
    seed: int = 0,
    dtype="float32",
) -> list[AblationRow]:
    """
    Train every requested branch set from the same initialization seed.

    Every variant shares its 3x3 kernels and classifier at initialization, and
    every variant converts to the same deploy architecture. Accuracies are
    reported as measured; nothing orders them.

    Args:
        spec: Architecture to ablate; its own branch flags are ignored
        train_set: Training split
        val_set: Validation split
        config: Training hyperparameters shared by all variants
        ablations: Names from ABLATIONS in report order; all of them if omitted
        seed: Initialization seed
        dtype: Parameter dtype

    Raises:
        ValidationError: unknown ablation name
        TrainingDivergedError: a variant's loss became non-finite
    """
    ablations = list(ABLATIONS) if ablations is None else list(ablations)
    unknown = [name for name in ablations if name not in ABLATIONS]
    if unknown:
        raise ValidationError(
            f"Unknown ablation '{unknown[0]}'. Valid options are: {', '.join(ABLATIONS)}."
        )
    rows = []
    for name in ablations:
        variant = ablate(spec, name)
        model = instantiate(variant, seed=seed, dtype=dtype)
        result = train(model, train_set, config, val_set)
        deploy_acc, _ = evaluate(convert_model(result.model), val_set)
        last = result.curve[-1]
        rows.append(
            AblationRow(
                ablation=name,
                branches="+".join(variant.branch_names),
                train_params=count_params(variant, "train"),
                deploy_params=count_params(variant, "deploy"),
                train_loss=last.train_loss,
                val_acc=last.val_acc,
                deploy_acc=deploy_acc,
            )
        )
        logging.info(
            f"Ablation {name}: loss {last.train_loss:.4f}, val acc {last.val_acc:.3f}, "
            f"deploy acc {deploy_acc:.3f}"
        )
    return rows
