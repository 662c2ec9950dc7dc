"""
Text and CSV output generation functions.
"""

import csv
import io

from repvgg_reparam.ablation import AblationRow
from repvgg_reparam.analysis import CostReport
from repvgg_reparam.bench import BenchResult
from repvgg_reparam.trainer import CurveRow

COST_COLUMNS = (
    "layer",
    "stage",
    "kind",
    "c_in",
    "c_out",
    "kernel",
    "stride",
    "groups",
    "out_h",
    "out_w",
    "params",
    "flops",
    "wino_muls",
)
CURVE_COLUMNS = ("epoch", "lr", "train_loss", "val_acc")
ABLATION_COLUMNS = (
    "ablation",
    "branches",
    "train_params",
    "deploy_params",
    "train_loss",
    "val_acc",
    "deploy_acc",
)


def format_millions(value: int) -> str:
    return f"{value / 1e6:.2f} M"


def format_billions(value: int) -> str:
    return f"{value / 1e9:.1f} B"


def format_bytes(value: int) -> str:
    return f"{value / 2**20:.2f} MiB"


def create_count_summary(report: CostReport) -> str:
    """
    One line per headline figure of a cost report.
    """
    lines = [
        f"Model: {report.spec_name} @ {report.input_res}x{report.input_res}, batch {report.batch}",
        f"Params (deploy): {format_millions(report.total_params)} ({report.total_params:,})",
        f"Params (train): {format_millions(report.train_params)} ({report.train_params:,})",
        f"Theoretical FLOPs: {format_billions(report.total_flops)} ({report.total_flops:,})",
        f"Wino MULs: {format_billions(report.total_wino_muls)} ({report.total_wino_muls:,})",
        f"Peak memory (train): {format_bytes(report.peak_memory_train)} "
        f"({report.peak_memory_train:,} bytes)",
        f"Peak memory (deploy): {format_bytes(report.peak_memory_deploy)} "
        f"({report.peak_memory_deploy:,} bytes)",
        f"Ensemble size: {report.ensemble_size_str} ({report.ensemble_size_sci})",
    ]
    return "\n".join(lines)


def _cost_rows(report: CostReport) -> list[list]:
    rows = []
    for row in report.rows:
        c = row.layer
        rows.append(
            [
                c.layer_index if c.kind == "conv" else "fc",
                c.stage if c.kind == "conv" else "head",
                c.kind,
                c.c_in,
                c.c_out,
                f"{c.kernel_h}x{c.kernel_w}",
                c.stride,
                c.groups,
                c.out_h,
                c.out_w,
                row.params,
                row.flops,
                row.wino_muls,
            ]
        )
    totals = [report.total_params, report.total_flops, report.total_wino_muls]
    rows.append(["total"] + [""] * (len(COST_COLUMNS) - 4) + totals)
    return rows


def _align(columns, body) -> str:
    rows = [list(columns)] + [[str(v) for v in r] for r in body]
    widths = [max(len(r[i]) for r in rows) for i in range(len(columns))]
    lines = []
    for n, row in enumerate(rows):
        lines.append("  ".join(v.rjust(w) for v, w in zip(row, widths, strict=True)))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def create_cost_table(report: CostReport) -> str:
    """
    Aligned plain-text table, one row per layer and a totals row last.
    """
    return _align(COST_COLUMNS, _cost_rows(report))


def create_cost_csv(report: CostReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(COST_COLUMNS)
    writer.writerows(_cost_rows(report))
    return buffer.getvalue()


def create_curve_csv(curve: list[CurveRow]) -> str:
    """Loss curve with columns epoch, lr, train_loss, val_acc."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for row in curve:
        writer.writerow([row.epoch, repr(row.lr), repr(row.train_loss), repr(row.val_acc)])
    return buffer.getvalue()


def create_ablation_table(rows: list[AblationRow]) -> str:
    """Aligned table, one row per trained branch set."""
    body = [
        [
            r.ablation,
            r.branches,
            r.train_params,
            r.deploy_params,
            f"{r.train_loss:.4f}",
            f"{r.val_acc:.3f}",
            f"{r.deploy_acc:.3f}",
        ]
        for r in rows
    ]
    return _align(ABLATION_COLUMNS, body)


def create_bench_summary(result: BenchResult) -> str:
    return (
        f"{result.model_name} [{result.mode}, {result.algorithm}] batch {result.batch_size}, "
        f"warmup {result.warmup}, timed {result.iterations}: "
        f"median {result.median_time * 1000:.3f} ms (IQR {result.iqr_time * 1000:.3f} ms), "
        f"{result.median_throughput:.2f} examples/s (IQR {result.iqr_throughput:.2f})"
    )


def create_comparison_summary(results: dict[str, BenchResult]) -> str:
    lines = [create_bench_summary(r) for r in results.values()]
    if "train" in results and "deploy" in results:
        speedup = results["train"].median_time / results["deploy"].median_time
        lines.append(f"Deploy speedup over train: {speedup:.2f}x")
    return "\n".join(lines)
