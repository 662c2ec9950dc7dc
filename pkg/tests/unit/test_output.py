import csv
import io
import logging
import unittest

from repvgg_reparam.ablation import AblationRow
from repvgg_reparam.analysis import build_cost_report
from repvgg_reparam.arch import build_custom_spec, build_preset
from repvgg_reparam.bench import BenchResult
from repvgg_reparam.output import (
    ABLATION_COLUMNS,
    COST_COLUMNS,
    create_ablation_table,
    create_bench_summary,
    create_comparison_summary,
    create_cost_csv,
    create_cost_table,
    create_count_summary,
    create_curve_csv,
    format_billions,
    format_bytes,
    format_millions,
)
from repvgg_reparam.trainer import CurveRow

# Configure logging for tests
logging.basicConfig(
    level=logging.DEBUG, format="%(asctime)s - %(levelname)s - %(message)s"
)


class TestFormatting(unittest.TestCase):
    def test_formatters(self):
        self.assertEqual(format_millions(8_309_384), "8.31 M")
        self.assertEqual(format_billions(1_426_479_104), "1.4 B")
        self.assertEqual(format_bytes(3 * 2**20), "3.00 MiB")

    def test_count_summary(self):
        summary = create_count_summary(build_cost_report(build_preset("A0")))
        lines = summary.splitlines()
        self.assertEqual(lines[0], "Model: A0 @ 224x224, batch 1")
        self.assertIn("Params (deploy): 8.31 M (8,309,384)", summary)
        self.assertTrue(any(line.startswith("Theoretical FLOPs: 1.") for line in lines))
        self.assertTrue(any(line.startswith("Wino MULs: 0.7 B") for line in lines))
        self.assertIn("Peak memory (train)", summary)
        self.assertIn(f"Ensemble size: {2**5 * 3**17}", summary)


class TestCostOutputs(unittest.TestCase):
    def setUp(self):
        self.report = build_cost_report(build_custom_spec((1, 2), (4, 4), num_classes=2), 8)

    def test_csv(self):
        rows = list(csv.reader(io.StringIO(create_cost_csv(self.report))))
        self.assertEqual(tuple(rows[0]), COST_COLUMNS)
        self.assertEqual(len(rows), 1 + 4 + 1)
        self.assertEqual(rows[1][:6], ["1", "1", "conv", "3", "4", "3x3"])
        self.assertEqual(rows[4][:3], ["fc", "head", "fc"])
        self.assertEqual(rows[-1][0], "total")
        self.assertEqual(rows[-1][-3:], ["418", "2888", "2568"])

    def test_table(self):
        lines = create_cost_table(self.report).splitlines()
        self.assertEqual(len(lines), 2 + 4 + 1)
        self.assertTrue(set(lines[1]) <= {"-", " "})
        self.assertTrue(lines[-1].lstrip().startswith("total"))
        self.assertEqual(len({len(line) for line in lines}), 1)


class TestOtherOutputs(unittest.TestCase):
    def test_curve_csv(self):
        curve = [CurveRow(0, 0.1, 1.5, 0.25), CurveRow(1, 0.05, 1.25, 0.5)]
        self.assertEqual(
            create_curve_csv(curve),
            "epoch,lr,train_loss,val_acc\n0,0.1,1.5,0.25\n1,0.05,1.25,0.5\n",
        )

    def test_ablation_table(self):
        rows = [
            AblationRow("full", "3x3+1x1+identity", 354, 270, 0.51234, 0.75, 0.75),
            AblationRow("plain", "3x3", 294, 270, 0.9, 0.5, 0.5),
        ]
        lines = create_ablation_table(rows).splitlines()
        self.assertEqual(len(lines), 2 + 2)
        self.assertEqual(lines[0].split(), list(ABLATION_COLUMNS))
        self.assertEqual(
            lines[2].split(), ["full", "3x3+1x1+identity", "354", "270", "0.5123", "0.750", "0.750"]
        )
        self.assertEqual(lines[3].split()[:2], ["plain", "3x3"])
        self.assertEqual(len({len(line) for line in lines}), 1)

    def bench(self, mode, seconds):
        return BenchResult("A0", mode, "direct", 4, 10, 30, [seconds] * 30)

    def test_bench_summary(self):
        text = create_bench_summary(self.bench("deploy", 0.5))
        self.assertIn("A0 [deploy, direct] batch 4", text)
        self.assertIn("median 500.000 ms", text)
        self.assertIn("8.00 examples/s", text)

    def test_comparison_summary(self):
        text = create_comparison_summary(
            {"train": self.bench("train", 0.6), "deploy": self.bench("deploy", 0.4)}
        )
        self.assertEqual(len(text.splitlines()), 3)
        self.assertTrue(text.endswith("Deploy speedup over train: 1.50x"))
        single = create_comparison_summary({"deploy": self.bench("deploy", 0.4)})
        self.assertNotIn("speedup", single)


if __name__ == "__main__":
    unittest.main()
