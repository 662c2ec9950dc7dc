"""
Wall-clock benchmarking of model forward passes.
"""

import logging
import statistics
import time
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from repvgg_reparam.arch import Model, forward
from repvgg_reparam.common import ModeError, ValidationError
from repvgg_reparam.reparam import convert_model

MIN_WARMUP = 10
MIN_ITERATIONS = 30
DEFAULT_BENCH_RESOLUTION = 224


@dataclass
class BenchResult:
    model_name: str
    mode: str
    algorithm: str
    batch_size: int
    warmup: int
    iterations: int
    times: list[float] = field(default_factory=list)

    @property
    def median_time(self) -> float:
        return statistics.median(self.times)

    @property
    def iqr_time(self) -> float:
        q1, _, q3 = statistics.quantiles(self.times, n=4)
        return q3 - q1

    @property
    def throughputs(self) -> list[float]:
        return [self.batch_size / t for t in self.times]

    @property
    def median_throughput(self) -> float:
        """Examples per second."""
        return statistics.median(self.throughputs)

    @property
    def iqr_throughput(self) -> float:
        q1, _, q3 = statistics.quantiles(self.throughputs, n=4)
        return q3 - q1


def run_benchmark(
    fn: Callable[[], object],
    model_name: str,
    mode: str,
    algorithm: str,
    batch_size: int,
    warmup: int = MIN_WARMUP,
    iterations: int = MIN_ITERATIONS,
    clock: Callable[[], float] = time.perf_counter,
) -> BenchResult:
    """
    Call `fn` `warmup` times untimed, then `iterations` times timed.

    Raises:
        ValidationError: warmup below MIN_WARMUP or iterations below MIN_ITERATIONS
    """
    if warmup < MIN_WARMUP:
        raise ValidationError(f"Warmup must be at least {MIN_WARMUP}, got {warmup}")
    if iterations < MIN_ITERATIONS:
        raise ValidationError(
            f"Timed iterations must be at least {MIN_ITERATIONS}, got {iterations}"
        )
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iterations):
        start = clock()
        fn()
        times.append(clock() - start)
    result = BenchResult(
        model_name=model_name,
        mode=mode,
        algorithm=algorithm,
        batch_size=batch_size,
        warmup=warmup,
        iterations=iterations,
        times=times,
    )
    logging.info(
        f"{model_name} [{mode}, {algorithm}] batch {batch_size}: median "
        f"{result.median_time * 1000:.2f} ms, {result.median_throughput:.1f} examples/s"
    )
    return result


def bench_input(model: Model, batch_size: int, resolution: int, seed: int = 0) -> np.ndarray:
    if batch_size < 1:
        raise ValidationError(f"Batch size must be at least 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    shape = (batch_size, model.spec.input_channels, resolution, resolution)
    return rng.standard_normal(shape).astype(model.dtype)


def bench_model(
    model: Model,
    batch_size: int = 8,
    resolution: int = DEFAULT_BENCH_RESOLUTION,
    algorithm: str = "direct",
    warmup: int = MIN_WARMUP,
    iterations: int = MIN_ITERATIONS,
    seed: int = 0,
    inputs: np.ndarray | None = None,
) -> BenchResult:
    """Time forward() of `model` on a fixed random batch."""
    x = inputs if inputs is not None else bench_input(model, batch_size, resolution, seed)
    return run_benchmark(
        lambda: forward(model, x, algorithm),
        model_name=model.spec.name,
        mode=model.mode,
        algorithm=algorithm,
        batch_size=x.shape[0],
        warmup=warmup,
        iterations=iterations,
    )


def compare_modes(
    model: Model,
    modes=("train", "deploy"),
    batch_size: int = 8,
    resolution: int = DEFAULT_BENCH_RESOLUTION,
    algorithm: str = "direct",
    warmup: int = MIN_WARMUP,
    iterations: int = MIN_ITERATIONS,
    seed: int = 0,
) -> dict[str, BenchResult]:
    """
    Benchmark the same model in several modes on identical inputs; a deploy
    counterpart is converted in memory when needed.

    Raises:
        ModeError: train mode requested for a deploy-only model
        ValidationError: unknown mode name
    """
    variants = {model.mode: model}
    for mode in modes:
        if mode not in ("train", "deploy"):
            raise ValidationError(f"Unknown mode '{mode}'. Valid options are: train, deploy.")
        if mode == "train" and model.mode != "train":
            raise ModeError("Cannot benchmark train mode from a deploy-mode model")
        if mode == "deploy" and "deploy" not in variants:
            variants["deploy"] = convert_model(model)
    x = bench_input(model, batch_size, resolution, seed)
    return {
        mode: bench_model(
            variants[mode],
            algorithm=algorithm,
            warmup=warmup,
            iterations=iterations,
            inputs=x,
        )
        for mode in modes
    }
