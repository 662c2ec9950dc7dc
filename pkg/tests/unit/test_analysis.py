import logging
import unittest

from repvgg_reparam.analysis import (
    block_peak_bytes,
    build_cost_report,
    count_flops,
    count_params,
    count_wino_muls,
    ensemble_size,
    layer_costs,
    peak_memory,
)
from repvgg_reparam.arch import (
    ABLATIONS,
    PRESETS,
    ablate,
    build_custom_spec,
    build_preset,
    build_spec,
    count_scalars,
    instantiate,
)
from repvgg_reparam.common import ValidationError
from repvgg_reparam.reparam import convert_model

# Configure logging for tests
logging.basicConfig(
    level=logging.DEBUG, format="%(asctime)s - %(levelname)s - %(message)s"
)

# Published deploy-mode figures at 224x224 with 1000 classes:
# params in millions, FLOPs and Winograd multiplies in billions.
PUBLISHED = {
    "A0": (8.30, 1.4, 0.7),
    "A1": (12.78, 2.4, 1.3),
    "A2": (25.49, 5.1, 2.7),
    "B0": (14.33, 3.1, 1.6),
    "B1": (51.82, 11.8, 5.9),
    "B1g2": (41.36, 8.8, 4.6),
    "B1g4": (36.12, 7.3, 3.9),
    "B2": (80.31, 18.4, 9.1),
    "B2g4": (55.77, 11.3, 6.0),
    "B3": (110.96, 26.2, 12.9),
    "B3g4": (75.62, 16.1, 8.4),
}


class TestPresetCosts(unittest.TestCase):
    def assertNearBillions(self, actual, published):
        tolerance = max(0.05 * published, 0.05)
        self.assertLessEqual(abs(actual / 1e9 - published), tolerance)

    def test_published_figures(self):
        for name, (params, flops, wino) in PUBLISHED.items():
            with self.subTest(name=name):
                spec = build_preset(name)
                self.assertLessEqual(abs(count_params(spec) / 1e6 - params), 0.01 * params)
                self.assertNearBillions(count_flops(spec), flops)
                self.assertNearBillions(count_wino_muls(spec), wino)

    def test_a0_exact_params(self):
        self.assertEqual(count_params(build_preset("A0")), 8_309_384)

    def test_grouping_reduces_cost(self):
        for base in ("B1", "B2"):
            with self.subTest(base=base):
                plain = build_preset(base)
                g2 = build_preset(f"{base}g2")
                g4 = build_preset(f"{base}g4")
                self.assertGreater(count_params(plain), count_params(g2))
                self.assertGreater(count_params(g2), count_params(g4))
                self.assertGreater(count_flops(plain), count_flops(g2))
                self.assertGreater(count_flops(g2), count_flops(g4))

    def test_flops_monotone_in_multipliers(self):
        multipliers = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0)
        for variant in ("A", "B"):
            with self.subTest(variant=variant, sweep="a"):
                flops = [count_flops(build_spec(variant, a, 2.5)) for a in multipliers]
                self.assertEqual(flops, sorted(flops))
                self.assertLess(flops[0], flops[-1])
            with self.subTest(variant=variant, sweep="b"):
                flops = [count_flops(build_spec(variant, 1.0, b)) for b in multipliers]
                self.assertEqual(flops, sorted(flops))
                self.assertLess(flops[0], flops[-1])

    def test_train_mode_has_more_params(self):
        spec = build_preset("A0")
        self.assertGreater(count_params(spec, "train"), count_params(spec, "deploy"))
        self.assertGreater(count_flops(spec, mode="train"), count_flops(spec, mode="deploy"))


class TestSmallSpecCosts(unittest.TestCase):
    def setUp(self):
        self.spec = build_custom_spec((1, 1), (4, 4), num_classes=2)

    def test_params_by_hand(self):
        self.assertEqual(count_params(self.spec, "deploy"), 112 + 148 + 10)
        self.assertEqual(count_params(self.spec, "train"), 152 + 192 + 10)

    def test_params_match_instantiated_models(self):
        model = instantiate(self.spec)
        self.assertEqual(count_scalars(model), count_params(self.spec, "train"))
        self.assertEqual(count_scalars(convert_model(model)), count_params(self.spec, "deploy"))
        spec = build_custom_spec((1, 3, 2), (4, 8, 8), groups=2, num_classes=3)
        model = instantiate(spec)
        self.assertEqual(count_scalars(model), count_params(spec, "train"))
        self.assertEqual(count_scalars(convert_model(model)), count_params(spec, "deploy"))

    def test_ablated_params_by_hand(self):
        plain = ablate(self.spec, "plain")
        self.assertEqual(count_params(plain, "deploy"), 112 + 148 + 10)
        self.assertEqual(count_params(plain, "train"), 124 + 160 + 10)
        self.assertEqual([c.kernel_h for c in layer_costs(plain, 8, "train")], [3, 3, 1])
        for name in ABLATIONS:
            with self.subTest(ablation=name):
                variant = ablate(self.spec, name)
                model = instantiate(variant)
                self.assertEqual(count_scalars(model), count_params(variant, "train"))
                self.assertEqual(count_params(variant, "deploy"), count_params(self.spec, "deploy"))

    def test_flops_by_hand(self):
        self.assertEqual(count_flops(self.spec, 8), 1728 + 576 + 8)
        # both convs are strided, so no Winograd savings
        self.assertEqual(count_wino_muls(self.spec, 8), 1728 + 576 + 8)

    def test_wino_savings_on_stride_one(self):
        spec = build_custom_spec((1, 2), (4, 4), num_classes=2)
        self.assertEqual(count_flops(spec, 8), 1728 + 576 + 576 + 8)
        self.assertEqual(count_wino_muls(spec, 8), 1728 + 576 + 256 + 8)

    def test_layer_costs(self):
        deploy = layer_costs(self.spec, 8, "deploy")
        self.assertEqual(len(deploy), 3)
        self.assertEqual(deploy[-1].kind, "fc")
        self.assertEqual((deploy[0].out_h, deploy[0].out_w), (4, 4))
        train = layer_costs(self.spec, 8, "train")
        self.assertEqual([c.kernel_h for c in train], [3, 1, 3, 1, 1])
        self.assertFalse(train[0].has_bias)

    def test_batch_scales_flops(self):
        single = sum(c.direct_muls for c in layer_costs(self.spec, 8))
        self.assertEqual(sum(c.direct_muls for c in layer_costs(self.spec, 8, batch=4)), 4 * single)

    def test_resolution_below_minimum(self):
        with self.assertRaises(ValidationError):
            count_flops(self.spec, 3)
        with self.assertRaises(ValidationError):
            peak_memory(self.spec, 2)

    def test_unknown_mode(self):
        with self.assertRaises(ValidationError):
            layer_costs(self.spec, 8, "eval")


class TestPeakMemory(unittest.TestCase):
    def test_block_peaks(self):
        x = 100
        self.assertEqual(block_peak_bytes(x, [[x]]), 2 * x)
        self.assertEqual(block_peak_bytes(x, [[x, x], []]), 3 * x)
        self.assertEqual(block_peak_bytes(x, [[50], [50], [50]]), x + 150)
        self.assertEqual(block_peak_bytes(x, [[50], [50]]), x + 100)
        self.assertEqual(block_peak_bytes(x, []), x)

    def test_small_spec(self):
        spec = build_custom_spec((1, 1), (4, 4), num_classes=2)
        self.assertEqual(peak_memory(spec, 8, "train"), 768 + 2 * 256)
        self.assertEqual(peak_memory(spec, 8, "deploy"), 768 + 256)
        self.assertEqual(peak_memory(spec, 8, "deploy", batch=2), 2 * (768 + 256))
        self.assertEqual(peak_memory(spec, 8, "deploy", bytes_per_scalar=8), 2 * (768 + 256))
        self.assertEqual(peak_memory(ablate(spec, "plain"), 8, "train"), 768 + 256)

    def test_residual_block_extra_peak(self):
        x = 4 * 64 * 56 * 56
        self.assertEqual(block_peak_bytes(x, [[x, x], []]) - x, 2 * x)

    def test_deploy_needs_less_memory(self):
        for name in PRESETS:
            with self.subTest(name=name):
                spec = build_preset(name)
                self.assertLess(peak_memory(spec, mode="deploy"), peak_memory(spec, mode="train"))


class TestEnsembleSize(unittest.TestCase):
    def test_presets(self):
        self.assertEqual(ensemble_size(build_preset("A0")), 2**5 * 3**17)
        self.assertEqual(ensemble_size(build_preset("B1g4")), 2**5 * 3**23)

    def test_ablated_presets(self):
        spec = build_preset("A0")
        self.assertEqual(ensemble_size(ablate(spec, "no-identity")), 2**22)
        self.assertEqual(ensemble_size(ablate(spec, "no-1x1")), 2**17)
        self.assertEqual(ensemble_size(ablate(spec, "plain")), 1)

    def test_single_stage(self):
        spec = build_preset("B0")
        self.assertEqual(ensemble_size(spec, stage=4), 28_697_814)
        self.assertEqual(ensemble_size(spec, stage=1), 2)

    def test_stage_out_of_range(self):
        with self.assertRaises(ValidationError):
            ensemble_size(build_preset("A0"), stage=6)


class TestCostReport(unittest.TestCase):
    def test_report_totals(self):
        spec = build_preset("A0")
        report = build_cost_report(spec)
        self.assertEqual(len(report.rows), spec.num_layers + 1)
        self.assertEqual(report.total_params, count_params(spec))
        self.assertEqual(report.total_flops, count_flops(spec))
        self.assertEqual(report.total_wino_muls, count_wino_muls(spec))
        self.assertEqual(report.train_params, count_params(spec, "train"))
        self.assertEqual(report.ensemble_size, 2**5 * 3**17)
        self.assertEqual(report.ensemble_size_sci, f"{float(2**5 * 3**17):.2e}")


if __name__ == "__main__":
    unittest.main()
