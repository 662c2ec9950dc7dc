"""
Numerical equivalence check between a train-mode model and its deploy form.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from repvgg_reparam.arch import Model, forward
from repvgg_reparam.common import ModeError, ValidationError


@dataclass(frozen=True)
class VerifyResult:
    trials: int
    max_abs_deviation: float
    argmax_mismatches: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_abs_deviation) and self.max_abs_deviation <= self.tolerance


def verify_equivalence(
    train_model: Model,
    deploy_model: Model,
    trials: int = 20,
    tolerance: float = 1e-3,
    resolution: int = 32,
    seed: int = 0,
    algorithm: str = "direct",
) -> VerifyResult:
    """
    Run both models on `trials` random single-image inputs.

    The reported deviation is the maximum over trials of the max-abs logit
    difference; non-finite logits count as an infinite deviation.

    Raises:
        ModeError: the models are not a train/deploy pair
        ValidationError: the models describe different architectures, or bad arguments
    """
    if train_model.mode != "train" or deploy_model.mode != "deploy":
        raise ModeError(
            f"Expected a train-mode and a deploy-mode model, got {train_model.mode} "
            f"and {deploy_model.mode}"
        )
    if train_model.spec.to_dict() != deploy_model.spec.to_dict():
        raise ValidationError(
            f"Models describe different architectures: {train_model.spec.name} "
            f"vs {deploy_model.spec.name}"
        )
    if trials < 1:
        raise ValidationError(f"Trials must be at least 1, got {trials}")
    if tolerance < 0:
        raise ValidationError(f"Tolerance must be non-negative, got {tolerance}")

    rng = np.random.default_rng(seed)
    spec = train_model.spec
    worst = 0.0
    mismatches = 0
    for trial in range(trials):
        x = rng.standard_normal((1, spec.input_channels, resolution, resolution))
        expected = forward(train_model, x)
        actual = forward(deploy_model, x, algorithm)
        deviation = float(np.max(np.abs(expected.astype(np.float64) - actual)))
        if not np.isfinite(deviation):
            deviation = float("inf")
        worst = max(worst, deviation)
        if np.argmax(expected) != np.argmax(actual):
            mismatches += 1
        logging.debug(f"Trial {trial + 1}/{trials}: max abs deviation {deviation:.3e}")
    result = VerifyResult(trials, worst, mismatches, tolerance)
    logging.info(
        f"Verified {trials} trials: max abs deviation {worst:.3e}, "
        f"{mismatches} argmax mismatches ({'pass' if result.passed else 'FAIL'})"
    )
    return result
