#!/usr/bin/env python
# PYTHON_ARGCOMPLETE_OK

import argparse
import logging
import sys
from pathlib import Path

import argcomplete

from repvgg_reparam.ablation import run_ablation
from repvgg_reparam.analysis import build_cost_report
from repvgg_reparam.arch import (
    ABLATIONS,
    PRESETS,
    ablate,
    build_custom_spec,
    build_preset,
    instantiate,
)
from repvgg_reparam.bench import (
    DEFAULT_BENCH_RESOLUTION,
    MIN_ITERATIONS,
    MIN_WARMUP,
    bench_model,
    compare_modes,
)
from repvgg_reparam.common import (
    DEFAULT_INPUT_RESOLUTION,
    SUPPORTED_DTYPES,
    ModeError,
    RepVggError,
    TrainingDivergedError,
    ValidationError,
    WeightFileError,
)
from repvgg_reparam.output import (
    create_ablation_table,
    create_bench_summary,
    create_comparison_summary,
    create_cost_csv,
    create_cost_table,
    create_count_summary,
    create_curve_csv,
)
from repvgg_reparam.reparam import convert_model
from repvgg_reparam.trainer import TrainConfig, make_toy_splits, train
from repvgg_reparam.verify import verify_equivalence
from repvgg_reparam.weight_file import load, save
from repvgg_reparam.winograd import FORWARD_ALGORITHMS

DATASETS = ("toy",)
TOY_RESOLUTION = 32


def parse_int_list(value):
    """
    Parses a comma-separated list of positive integers, e.g. '1,2,4'.
    """
    try:
        items = [int(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{value}'") from e
    if not items or any(v <= 0 for v in items):
        raise argparse.ArgumentTypeError(f"expected positive integers, got '{value}'")
    return items


def parse_mode_list(value):
    modes = [v.strip() for v in value.split(",") if v.strip()]
    if not modes or any(m not in ("train", "deploy") for m in modes):
        raise argparse.ArgumentTypeError(
            f"expected a comma-separated list of train/deploy, got '{value}'"
        )
    return modes


def parse_ablation_list(value):
    names = [v.strip() for v in value.split(",") if v.strip()]
    if not names or any(n not in ABLATIONS for n in names):
        raise argparse.ArgumentTypeError(
            f"expected a comma-separated list of {', '.join(ABLATIONS)}, got '{value}'"
        )
    return names


def _add_training_arguments(parser):
    parser.add_argument("--epochs", type=int, default=30, help="Number of epochs. Default is 30.")
    parser.add_argument("--lr", type=float, default=0.05, help="Initial learning rate. Default is 0.05.")
    parser.add_argument("--momentum", type=float, default=0.9, help="SGD momentum. Default is 0.9.")
    parser.add_argument(
        "--weight-decay",
        type=float,
        default=1e-4,
        help="Weight decay on conv kernels and the classifier weight. Default is 1e-4.",
    )
    parser.add_argument("--batch-size", type=int, default=32, help="Minibatch size. Default is 32.")
    parser.add_argument(
        "--no-cosine",
        action="store_true",
        help="Keep the learning rate constant instead of cosine annealing.",
    )
    parser.add_argument("--seed", type=int, default=0, help="Data and shuffling seed. Default is 0.")
    parser.add_argument("--train-size", type=int, default=128, help="Training examples. Default is 128.")
    parser.add_argument("--val-size", type=int, default=64, help="Validation examples. Default is 64.")


def _add_spec_arguments(parser, required=True):
    group = parser.add_mutually_exclusive_group(required=required)
    group.add_argument(
        "--preset",
        choices=list(PRESETS),
        help="Named architecture preset (RepVGG-A0 ... B3g4).",
    )
    group.add_argument(
        "--layers",
        type=parse_int_list,
        help="Custom architecture: comma-separated block counts per stage, e.g. '1,2'. Requires --widths.",
    )
    parser.add_argument(
        "--widths",
        type=parse_int_list,
        help="Custom architecture: comma-separated stage widths, e.g. '8,16'.",
    )
    parser.add_argument(
        "--groups",
        type=int,
        default=1,
        choices=[1, 2, 4],
        help="Group count of groupwise layers for a custom architecture. Default is 1.",
    )
    parser.add_argument(
        "--num-classes",
        type=int,
        help="Number of classifier outputs. Default is 1000 for presets and 4 for custom architectures.",
    )


def parse_arguments(argv=None):
    """
    Parses command-line arguments for the tool.
    """
    parser = argparse.ArgumentParser(
        description="Build, train, convert, verify and measure RepVGG models."
    )
    parser.add_argument(
        "--debug",
        action="store_true",
        help="Enable debug logging.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="Instantiate a randomly initialized train-mode model.")
    _add_spec_arguments(p)
    p.add_argument("--seed", type=int, default=0, help="Initialization seed. Default is 0.")
    p.add_argument(
        "--dtype",
        choices=SUPPORTED_DTYPES,
        default="float32",
        help="Parameter dtype. Default is float32.",
    )
    p.add_argument(
        "--branches",
        choices=list(ABLATIONS),
        default="full",
        help="Branch set of every block: full, no-identity, no-1x1 or plain. Default is 'full'.",
    )
    p.add_argument("--out", required=True, help="Path of the weight file to write.")

    p = sub.add_parser("train", help="Train a train-mode model on a toy dataset.")
    p.add_argument("--model", required=True, help="Train-mode weight file.")
    p.add_argument("--dataset", choices=DATASETS, default="toy", help="Dataset. Default is 'toy'.")
    _add_training_arguments(p)
    p.add_argument("--out", required=True, help="Path of the trained weight file to write.")
    p.add_argument("--curve", help="Path to write the loss curve CSV (epoch, lr, train_loss, val_acc).")

    p = sub.add_parser(
        "ablation",
        help="Train the full, no-identity, no-1x1 and plain variants of one architecture and compare accuracy.",
    )
    _add_spec_arguments(p)
    _add_training_arguments(p)
    p.add_argument(
        "--ablations",
        type=parse_ablation_list,
        default=list(ABLATIONS),
        help="Comma-separated branch sets to train, in report order. Default is all four.",
    )
    p.add_argument(
        "--dtype",
        choices=SUPPORTED_DTYPES,
        default="float32",
        help="Parameter dtype. Default is float32.",
    )

    p = sub.add_parser("convert", help="Re-parameterize a train-mode model into deploy mode.")
    p.add_argument("--model", required=True, help="Weight file to convert.")
    p.add_argument("--out", required=True, help="Path of the deploy weight file to write.")

    p = sub.add_parser("verify", help="Check a train/deploy pair for numerical equivalence.")
    p.add_argument("--train", required=True, help="Train-mode weight file.")
    p.add_argument("--deploy", required=True, help="Deploy-mode weight file.")
    p.add_argument("--trials", type=int, default=20, help="Random inputs to compare. Default is 20.")
    p.add_argument("--tol", type=float, default=1e-3, help="Max abs logit deviation allowed. Default is 1e-3.")
    p.add_argument("--res", type=int, default=TOY_RESOLUTION, help="Input resolution. Default is 32.")
    p.add_argument("--seed", type=int, default=0, help="Input seed. Default is 0.")
    p.add_argument(
        "--mode",
        dest="algorithm",
        choices=FORWARD_ALGORITHMS,
        default="direct",
        help="Convolution algorithm for the deploy model. Default is 'direct'.",
    )

    for name, help_text in (
        ("count", "Print analytic costs: params, FLOPs, Wino MULs, peak memory, ensemble size."),
        ("export-csv", "Write the per-layer cost report as CSV."),
    ):
        p = sub.add_parser(name, help=help_text)
        source = p.add_mutually_exclusive_group(required=True)
        source.add_argument("--preset", choices=list(PRESETS), help="Named architecture preset.")
        source.add_argument("--model", help="Weight file whose architecture to analyse.")
        p.add_argument(
            "--res",
            type=int,
            default=DEFAULT_INPUT_RESOLUTION,
            help=f"Input resolution. Default is {DEFAULT_INPUT_RESOLUTION}.",
        )
        p.add_argument("--batch", type=int, default=1, help="Batch size for memory figures. Default is 1.")
        p.add_argument("--num-classes", type=int, default=1000, help="Classifier outputs for presets. Default is 1000.")
        if name == "count":
            p.add_argument("--csv", action="store_true", help="Print the per-layer report as CSV.")
            p.add_argument("--table", action="store_true", help="Also print the per-layer table.")
        else:
            p.add_argument("--out", required=True, help="Path of the CSV file to write.")

    p = sub.add_parser("bench", help="Time forward passes.")
    p.add_argument("--model", required=True, help="Weight file to benchmark.")
    p.add_argument("--batch", type=int, default=8, help="Batch size. Default is 8.")
    p.add_argument(
        "--res",
        type=int,
        default=DEFAULT_BENCH_RESOLUTION,
        help=f"Input resolution. Default is {DEFAULT_BENCH_RESOLUTION}.",
    )
    p.add_argument(
        "--mode",
        dest="algorithm",
        choices=FORWARD_ALGORITHMS,
        default="direct",
        help="Convolution algorithm: direct, winograd or auto. Default is 'direct'.",
    )
    p.add_argument("--warmup", type=int, default=MIN_WARMUP, help=f"Untimed iterations. Default is {MIN_WARMUP}.")
    p.add_argument(
        "--iterations",
        type=int,
        default=MIN_ITERATIONS,
        help=f"Timed iterations. Default is {MIN_ITERATIONS}.",
    )
    p.add_argument(
        "--compare",
        type=parse_mode_list,
        help="Comma-separated model modes to time on the same inputs, e.g. 'train,deploy'.",
    )
    p.add_argument("--seed", type=int, default=0, help="Input seed. Default is 0.")

    # Enable tab completion
    argcomplete.autocomplete(parser)
    args = parser.parse_args(argv)
    if getattr(args, "layers", None) and not args.widths:
        parser.error("--layers requires --widths")
    if getattr(args, "widths", None) and not args.layers:
        parser.error("--widths requires --layers")
    return args


def configure_logging(debug):
    """
    Configures logging for the tool.
    """
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(sys.stderr)  # Log to stderr
        ],
    )


def resolve_spec(args):
    """
    Builds the ModelSpec selected by --preset, --model or --layers/--widths.
    """
    if getattr(args, "model", None):
        return load(args.model).spec
    if args.preset:
        return build_preset(args.preset, num_classes=args.num_classes or 1000)
    if not args.widths:
        raise ValidationError("--layers requires --widths")
    return build_custom_spec(
        args.layers,
        args.widths,
        groups=args.groups,
        num_classes=args.num_classes or 4,
    )


def _train_config(args):
    return TrainConfig(
        learning_rate=args.lr,
        cosine=not args.no_cosine,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )


def _toy_splits(args, spec, dtype):
    return make_toy_splits(
        num_classes=spec.num_classes,
        train_size=args.train_size,
        val_size=args.val_size,
        size=max(TOY_RESOLUTION, spec.min_input_size),
        channels=spec.input_channels,
        seed=args.seed,
        dtype=dtype,
    )


def run_build(args):
    spec = ablate(resolve_spec(args), args.branches)
    model = instantiate(spec, seed=args.seed, dtype=args.dtype)
    save(model, args.out)
    print(f"Wrote {model.mode}-mode {spec.name} ({len(model.layers)} blocks) to {args.out}")


def run_train(args):
    model = load(args.model)
    config = _train_config(args)
    train_set, val_set = _toy_splits(args, model.spec, model.dtype)
    try:
        result = train(model, train_set, config, val_set)
    except TrainingDivergedError as e:
        if e.last_finite_model is not None:
            save(e.last_finite_model, args.out)
            logging.warning(f"Saved last finite model from before epoch {e.epoch} to {args.out}")
        raise
    save(result.model, args.out)
    if args.curve:
        Path(args.curve).write_text(create_curve_csv(result.curve), encoding="utf-8")
        logging.info(f"Loss curve written to {args.curve}")
    first, last = result.curve[0], result.curve[-1]
    print(
        f"Trained {model.spec.name} for {config.epochs} epochs: loss {first.train_loss:.4f} -> "
        f"{last.train_loss:.4f}, val acc {last.val_acc:.3f}"
    )


def run_ablation_report(args):
    spec = resolve_spec(args)
    train_set, val_set = _toy_splits(args, spec, args.dtype)
    rows = run_ablation(
        spec,
        train_set,
        val_set,
        _train_config(args),
        ablations=args.ablations,
        seed=args.seed,
        dtype=args.dtype,
    )
    print(f"Branch ablation of {spec.name}, {args.epochs} epochs on {len(train_set)} toy examples")
    print(create_ablation_table(rows))


def run_convert(args):
    model = load(args.model)
    deploy = convert_model(model)
    save(deploy, args.out)
    print(
        f"Wrote deploy-mode {model.spec.name} to {args.out}: "
        f"{model.num_scalars:,} -> {deploy.num_scalars:,} stored scalars"
    )


def run_verify(args):
    result = verify_equivalence(
        load(args.train),
        load(args.deploy),
        trials=args.trials,
        tolerance=args.tol,
        resolution=args.res,
        seed=args.seed,
        algorithm=args.algorithm,
    )
    print(f"max abs deviation: {result.max_abs_deviation:.6e} (tolerance {result.tolerance:g})")
    print(f"argmax mismatches: {result.argmax_mismatches} of {result.trials}")
    return 0 if result.passed else 1


def run_count(args):
    report = build_cost_report(resolve_spec(args), args.res, args.batch)
    if args.csv:
        print(create_cost_csv(report), end="")
        return
    print(create_count_summary(report))
    if args.table:
        print()
        print(create_cost_table(report))


def run_export_csv(args):
    report = build_cost_report(resolve_spec(args), args.res, args.batch)
    Path(args.out).write_text(create_cost_csv(report), encoding="utf-8")
    print(f"Cost report for {report.spec_name} written to {args.out}")


def run_bench(args):
    model = load(args.model)
    if args.compare:
        results = compare_modes(
            model,
            modes=args.compare,
            batch_size=args.batch,
            resolution=args.res,
            algorithm=args.algorithm,
            warmup=args.warmup,
            iterations=args.iterations,
            seed=args.seed,
        )
        print(create_comparison_summary(results))
        return
    result = bench_model(
        model,
        batch_size=args.batch,
        resolution=args.res,
        algorithm=args.algorithm,
        warmup=args.warmup,
        iterations=args.iterations,
        seed=args.seed,
    )
    print(create_bench_summary(result))


COMMANDS = {
    "build": run_build,
    "train": run_train,
    "ablation": run_ablation_report,
    "convert": run_convert,
    "verify": run_verify,
    "count": run_count,
    "export-csv": run_export_csv,
    "bench": run_bench,
}


def main(argv=None):
    """
    Main function: dispatch one subcommand and exit with its status.
    """
    args = parse_arguments(argv)
    configure_logging(args.debug)

    try:
        status = COMMANDS[args.command](args)
    except WeightFileError as e:
        print(f"ERROR: Invalid weight file. {e}", file=sys.stderr)
        sys.exit(1)
    except ModeError as e:
        print(f"ERROR: Wrong model mode. {e}", file=sys.stderr)
        sys.exit(1)
    except TrainingDivergedError as e:
        print(f"ERROR: Training diverged. {e}", file=sys.stderr)
        sys.exit(1)
    except ValidationError as e:
        print(f"ERROR: Input validation failed. {e}", file=sys.stderr)
        sys.exit(1)
    except RepVggError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        sys.exit(1)
    except OSError as e:
        print(f"ERROR: File operation failed. {e}", file=sys.stderr)
        sys.exit(1)
    if status:
        sys.exit(status)


if __name__ == "__main__":  # pragma: no cover
    try:
        main()
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.", file=sys.stderr)
        sys.exit(130)  # Standard exit code for SIGINT
