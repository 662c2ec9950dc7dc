import dataclasses
import logging
import unittest

import numpy as np

from repvgg_reparam.arch import build_custom_spec, instantiate
from repvgg_reparam.common import ModeError, ValidationError
from repvgg_reparam.reparam import convert_model
from repvgg_reparam.verify import VerifyResult, verify_equivalence

# Configure logging for tests
logging.basicConfig(
    level=logging.DEBUG, format="%(asctime)s - %(levelname)s - %(message)s"
)


class TestVerifyEquivalence(unittest.TestCase):
    def setUp(self):
        self.spec = build_custom_spec((1, 2, 2), (4, 8, 8), groups=2, num_classes=5)
        self.model = instantiate(self.spec, seed=1)
        self.deploy = convert_model(self.model)

    def test_converted_pair_passes(self):
        for algorithm in ("direct", "winograd", "auto"):
            with self.subTest(algorithm=algorithm):
                result = verify_equivalence(
                    self.model, self.deploy, trials=5, resolution=16, algorithm=algorithm
                )
                self.assertTrue(result.passed)
                self.assertEqual(result.trials, 5)
                self.assertEqual(result.argmax_mismatches, 0)
                self.assertLess(result.max_abs_deviation, 1e-4)

    def test_unrelated_pair_fails(self):
        other = convert_model(instantiate(self.spec, seed=2))
        result = verify_equivalence(self.model, other, trials=5, resolution=16)
        self.assertFalse(result.passed)
        self.assertGreater(result.max_abs_deviation, 1e-3)

    def test_tampered_bias_fails(self):
        layer = self.deploy.layers[-1]
        bias = layer.op.bias + np.float32(0.5)
        tampered_layer = dataclasses.replace(layer, op=dataclasses.replace(layer.op, bias=bias))
        tampered = dataclasses.replace(
            self.deploy, layers=self.deploy.layers[:-1] + (tampered_layer,)
        )
        result = verify_equivalence(self.model, tampered, trials=3, resolution=16)
        self.assertFalse(result.passed)

    def test_non_finite_logits_fail(self):
        bias = self.deploy.head.bias.copy()
        bias[0] = np.nan
        broken = dataclasses.replace(
            self.deploy, head=dataclasses.replace(self.deploy.head, bias=bias)
        )
        result = verify_equivalence(self.model, broken, trials=3, resolution=16)
        self.assertFalse(result.passed)
        self.assertEqual(result.max_abs_deviation, float("inf"))

    def test_wrong_modes(self):
        with self.assertRaises(ModeError):
            verify_equivalence(self.deploy, self.model)
        with self.assertRaises(ModeError):
            verify_equivalence(self.model, self.model)

    def test_different_architectures(self):
        other = convert_model(instantiate(build_custom_spec((1, 2, 2), (4, 8, 16), num_classes=5)))
        with self.assertRaises(ValidationError):
            verify_equivalence(self.model, other)

    def test_bad_arguments(self):
        with self.assertRaises(ValidationError):
            verify_equivalence(self.model, self.deploy, trials=0)
        with self.assertRaises(ValidationError):
            verify_equivalence(self.model, self.deploy, tolerance=-1.0)

    def test_passed_ignores_argmax(self):
        self.assertTrue(VerifyResult(10, 1e-4, 1, 1e-3).passed)
        self.assertFalse(VerifyResult(10, 2e-3, 0, 1e-3).passed)
        self.assertFalse(VerifyResult(10, float("nan"), 0, 1e-3).passed)


if __name__ == "__main__":
    unittest.main()
