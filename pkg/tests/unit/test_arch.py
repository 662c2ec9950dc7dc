import logging
import unittest

import numpy as np
import numpy.testing as npt

from repvgg_reparam.arch import (
    ABLATIONS,
    PRESETS,
    Model,
    ModelSpec,
    ablate,
    build_custom_spec,
    build_preset,
    build_spec,
    count_scalars,
    default_groupwise_layers,
    forward,
    instantiate,
    model_from_state,
    model_state,
    stage_outputs,
)
from repvgg_reparam.block import RepVggBlock
from repvgg_reparam.common import ShapeError, ValidationError
from repvgg_reparam.reparam import convert_model

# Configure logging for tests
logging.basicConfig(
    level=logging.DEBUG, format="%(asctime)s - %(levelname)s - %(message)s"
)


class TestSpecs(unittest.TestCase):
    def test_preset_widths(self):
        expected = {
            "A0": (48, 48, 96, 192, 1280),
            "A1": (64, 64, 128, 256, 1280),
            "A2": (64, 96, 192, 384, 1408),
            "B0": (64, 64, 128, 256, 1280),
            "B1": (64, 128, 256, 512, 2048),
            "B2": (64, 160, 320, 640, 2560),
            "B3": (64, 192, 384, 768, 2560),
        }
        for name, widths in expected.items():
            with self.subTest(name=name):
                self.assertEqual(build_preset(name).widths, widths)

    def test_all_presets_build(self):
        for name in PRESETS:
            with self.subTest(name=name):
                spec = build_preset(name)
                self.assertEqual(spec.name, name)
                self.assertEqual(spec.num_stages, 5)

    def test_layer_counts(self):
        self.assertEqual(build_preset("A0").num_layers, 22)
        self.assertEqual(build_preset("B0").num_layers, 28)

    def test_default_groupwise_layers(self):
        self.assertEqual(
            default_groupwise_layers((1, 2, 4, 14, 1)), (3, 5, 7, 9, 11, 13, 15, 17, 19, 21)
        )
        layers_b = default_groupwise_layers((1, 4, 6, 16, 1))
        self.assertEqual(layers_b[0], 3)
        self.assertEqual(layers_b[-1], 27)
        self.assertEqual(len(layers_b), 13)
        self.assertEqual(build_preset("B1g2").groupwise_layers, layers_b)
        self.assertEqual(build_preset("B1").groupwise_layers, ())

    def test_groupwise_layers_never_touch_stage_boundaries(self):
        spec = build_preset("B2g4")
        for plan in spec.layer_plan():
            if plan.groups > 1:
                self.assertEqual(plan.stride, 1)
                self.assertEqual(plan.index % 2, 1)

    def test_width_rounds_up_to_groups(self):
        spec = build_spec("B", 0.7, 2.5, groups=2)
        self.assertEqual(spec.widths, (45, 46, 90, 180, 1280))

    def test_exact_width_not_divisible_by_groups(self):
        with self.assertRaises(ValidationError) as ctx:
            build_spec("B", 1.03125, 2.5, groups=4)
        self.assertIn("Stage 2", str(ctx.exception))

    def test_stage1_width_cap(self):
        self.assertEqual(build_spec("A", 2.0, 2.0).widths[0], 64)

    def test_strides_and_identity(self):
        spec = build_preset("A0")
        plans = spec.layer_plan()
        firsts = {1, 2, 4, 8, 22}
        for plan in plans:
            self.assertEqual(plan.stride, 2 if plan.index in firsts else 1)
            self.assertEqual(plan.has_identity, plan.index not in firsts)

    def test_invalid_arguments(self):
        with self.assertRaises(ValidationError):
            build_spec("C", 1.0, 1.0)
        with self.assertRaises(ValidationError):
            build_spec("A", 0.0, 1.0)
        with self.assertRaises(ValidationError):
            build_spec("A", 1.0, 1.0, groups=3)
        with self.assertRaises(ValidationError):
            build_preset("B9")

    def test_custom_spec_validation(self):
        with self.assertRaises(ValidationError):
            build_custom_spec((1, 2), (4,))
        with self.assertRaises(ValidationError):
            build_custom_spec((1, 0), (4, 4))
        with self.assertRaises(ValidationError):
            build_custom_spec((1, 4), (4, 8), groups=2, groupwise_layers=(3, 4))
        with self.assertRaises(ValidationError):
            build_custom_spec((1, 4), (4, 6), groups=4, groupwise_layers=(3,))
        with self.assertRaises(ValidationError):
            build_custom_spec((1, 2), (4, 8), groupwise_layers=(3,))

    def test_custom_spec_default_groupwise(self):
        spec = build_custom_spec((1, 4, 1), (4, 8, 8), groups=2)
        self.assertEqual(spec.groupwise_layers, (3, 5))

    def test_min_input_size(self):
        self.assertEqual(build_preset("A0").min_input_size, 32)
        self.assertEqual(build_custom_spec((1, 1), (4, 4)).min_input_size, 4)

    def test_dict_round_trip(self):
        spec = build_preset("B1g4", num_classes=10)
        self.assertEqual(ModelSpec.from_dict(spec.to_dict()), spec)

    def test_ablate(self):
        spec = build_preset("A0")
        expected = {
            "full": ("3x3", "1x1", "identity"),
            "no-identity": ("3x3", "1x1"),
            "no-1x1": ("3x3", "identity"),
            "plain": ("3x3",),
        }
        self.assertEqual(list(ABLATIONS), list(expected))
        for name, branches in expected.items():
            with self.subTest(ablation=name):
                variant = ablate(spec, name)
                self.assertEqual(variant.branch_names, branches)
                self.assertEqual(variant.widths, spec.widths)
                self.assertEqual(ModelSpec.from_dict(variant.to_dict()), variant)
                for plan in variant.layer_plan():
                    eligible = plan.stride == 1 and plan.in_channels == plan.out_channels
                    self.assertEqual(plan.has_identity, eligible and "identity" in branches)
                    self.assertEqual(plan.num_branches, 1 + int("1x1" in branches) + int(plan.has_identity))
        self.assertEqual(ablate(spec, "full").name, "A0")
        self.assertEqual(ablate(spec, "plain").name, "A0[plain]")
        with self.assertRaises(ValidationError):
            ablate(spec, "no-3x3")

    def test_from_dict_defaults_to_all_branches(self):
        data = build_preset("A0").to_dict()
        self.assertNotIn("use_1x1", data)
        self.assertNotIn("use_identity", data)
        spec = ModelSpec.from_dict(data)
        self.assertTrue(spec.use_1x1)
        self.assertTrue(spec.use_identity)
        plain = ablate(build_preset("A0"), "plain").to_dict()
        self.assertIs(plain["use_1x1"], False)
        self.assertIs(plain["use_identity"], False)

    def test_from_dict_malformed(self):
        data = build_preset("A0").to_dict()
        del data["widths"]
        with self.assertRaises(ValidationError):
            ModelSpec.from_dict(data)


class TestModel(unittest.TestCase):
    def setUp(self):
        self.spec = build_custom_spec((1, 2, 2), (4, 8, 8), groups=2, num_classes=5)
        self.model = instantiate(self.spec, seed=3, dtype="float64")

    def test_instantiate_is_deterministic(self):
        other = instantiate(self.spec, seed=3, dtype="float64")
        for a, b in zip(model_state(self.model).values(), model_state(other).values(), strict=True):
            npt.assert_array_equal(a, b)
        different = instantiate(self.spec, seed=4, dtype="float64")
        self.assertFalse(np.array_equal(self.model.head.weight, different.head.weight))

    def test_instantiate_structure(self):
        self.assertEqual(self.model.mode, "train")
        self.assertEqual(len(self.model.layers), 5)
        self.assertTrue(all(isinstance(layer.op, RepVggBlock) for layer in self.model.layers))
        self.assertEqual([layer.groups for layer in self.model.layers], [1, 1, 2, 1, 1])
        self.assertEqual(self.model.dtype, np.float64)

    def test_count_scalars_matches_state(self):
        total = sum(a.size for a in model_state(self.model).values())
        self.assertEqual(count_scalars(self.model), total)

    def test_forward_shape_and_dtype(self):
        logits = forward(self.model, np.zeros((3, 3, 8, 8)))
        self.assertEqual(logits.shape, (3, 5))
        self.assertEqual(logits.dtype, np.float64)
        model32 = instantiate(self.spec, dtype="float32")
        self.assertEqual(forward(model32, np.zeros((1, 3, 8, 8))).dtype, np.float32)

    def test_forward_input_checks(self):
        with self.assertRaises(ShapeError):
            forward(self.model, np.zeros((1, 1, 8, 8)))
        with self.assertRaises(ShapeError):
            forward(self.model, np.zeros((1, 3, 4, 8)))
        with self.assertRaises(ShapeError):
            forward(self.model, np.zeros((3, 8, 8)))

    def test_forward_accepts_odd_sizes(self):
        self.assertEqual(forward(self.model, np.ones((1, 3, 9, 13))).shape, (1, 5))

    def test_stage_outputs(self):
        outputs = stage_outputs(self.model, np.ones((1, 3, 16, 16)))
        self.assertEqual([o.shape for o in outputs], [(1, 4, 8, 8), (1, 8, 4, 4), (1, 8, 2, 2)])

    def test_algorithms_agree(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 10, 10))
        expected = forward(self.model, x)
        for algorithm in ("winograd", "auto"):
            npt.assert_allclose(forward(self.model, x, algorithm), expected, rtol=1e-9, atol=1e-9)

    def test_unsupported_dtype(self):
        with self.assertRaises(ValidationError):
            instantiate(self.spec, dtype="float16")

    def test_mode_must_match_ops(self):
        deploy = convert_model(self.model)
        with self.assertRaises(ValidationError):
            Model(self.spec, "deploy", self.model.layers, self.model.head)
        with self.assertRaises(ValidationError):
            Model(self.spec, "train", deploy.layers, deploy.head)
        with self.assertRaises(ValidationError):
            Model(self.spec, "eval", deploy.layers, deploy.head)


class TestModelState(unittest.TestCase):
    def setUp(self):
        self.spec = build_custom_spec((1, 2), (4, 4), num_classes=2)
        self.model = instantiate(self.spec, dtype="float64")

    def test_names(self):
        state = model_state(self.model)
        self.assertIn("layers.1.conv3.kernel", state)
        self.assertIn("layers.3.bn_id.var", state)
        self.assertNotIn("layers.2.bn_id.var", state)
        self.assertNotIn("layers.1.bn_id.var", state)
        self.assertEqual(list(state)[-2:], ["head.weight", "head.bias"])
        deploy_state = model_state(convert_model(self.model))
        self.assertIn("layers.3.fused.bias", deploy_state)
        self.assertEqual(len(deploy_state), 2 * 3 + 2)

    def test_round_trip(self):
        for model in (self.model, convert_model(self.model)):
            with self.subTest(mode=model.mode):
                rebuilt = model_from_state(self.spec, model.mode, model_state(model))
                x = np.random.default_rng(1).standard_normal((1, 3, 8, 8))
                npt.assert_array_equal(forward(rebuilt, x), forward(model, x))

    def test_ablated_names(self):
        plain = instantiate(ablate(self.spec, "plain"), dtype="float64")
        state = model_state(plain)
        self.assertEqual(
            sorted(state),
            sorted(
                [f"layers.{i}.conv3.kernel" for i in (1, 2, 3)]
                + [f"layers.{i}.bn3.{f}" for i in (1, 2, 3) for f in ("mu", "var", "gamma", "beta")]
                + ["head.weight", "head.bias"]
            ),
        )
        no_identity = model_state(instantiate(ablate(self.spec, "no-identity")))
        self.assertNotIn("layers.3.bn_id.var", no_identity)
        self.assertIn("layers.3.conv1.kernel", no_identity)
        no_1x1 = model_state(instantiate(ablate(self.spec, "no-1x1")))
        self.assertIn("layers.3.bn_id.var", no_1x1)
        self.assertNotIn("layers.3.conv1.kernel", no_1x1)

    def test_ablated_round_trip(self):
        for name in ABLATIONS:
            with self.subTest(ablation=name):
                spec = ablate(self.spec, name)
                model = instantiate(spec, seed=2, dtype="float64")
                rebuilt = model_from_state(spec, "train", model_state(model))
                x = np.random.default_rng(1).standard_normal((1, 3, 8, 8))
                npt.assert_array_equal(forward(rebuilt, x), forward(model, x))

    def test_full_state_does_not_fit_plain_spec(self):
        with self.assertRaises(ValidationError):
            model_from_state(ablate(self.spec, "plain"), "train", model_state(self.model))

    def test_missing_tensor(self):
        state = model_state(self.model)
        del state["layers.2.bn1.gamma"]
        with self.assertRaises(ValidationError):
            model_from_state(self.spec, "train", state)

    def test_unexpected_tensor(self):
        state = model_state(self.model)
        state["layers.9.conv3.kernel"] = np.zeros((1, 1, 3, 3))
        with self.assertRaises(ValidationError):
            model_from_state(self.spec, "train", state)

    def test_wrong_shape(self):
        state = model_state(self.model)
        state["head.weight"] = np.zeros((3, 4))
        state["head.bias"] = np.zeros(3)
        with self.assertRaises(ShapeError):
            model_from_state(self.spec, "train", state)


if __name__ == "__main__":
    unittest.main()
