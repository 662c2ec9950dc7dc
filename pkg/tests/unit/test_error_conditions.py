#!/usr/bin/env python3

import unittest

import numpy as np

from repvgg_reparam.common import (
    BnParams,
    ConvParams,
    ModeError,
    RepVggError,
    ShapeError,
    TrainingDivergedError,
    UnsupportedConfigurationError,
    ValidationError,
    WeightFileError,
    as_dtype,
)


class TestErrorConditions(unittest.TestCase):
    def test_hierarchy(self):
        """Every package error derives from RepVggError."""
        for cls in (
            ShapeError,
            UnsupportedConfigurationError,
            ValidationError,
            ModeError,
            WeightFileError,
            TrainingDivergedError,
        ):
            self.assertTrue(issubclass(cls, RepVggError))

    def test_weight_file_error_names_field(self):
        """WeightFileError prefixes its message with the offending field."""
        error = WeightFileError("bad value", field="tensors[2].offset")
        self.assertEqual(error.field, "tensors[2].offset")
        self.assertEqual(str(error), "tensors[2].offset: bad value")
        self.assertEqual(str(WeightFileError("plain")), "plain")

    def test_training_diverged_carries_model(self):
        """TrainingDivergedError keeps the epoch and last finite model."""
        sentinel = object()
        error = TrainingDivergedError("nan", epoch=3, last_finite_model=sentinel)
        self.assertEqual(error.epoch, 3)
        self.assertIs(error.last_finite_model, sentinel)

    def test_as_dtype_invalid(self):
        """as_dtype rejects dtypes outside float32/float64."""
        with self.assertRaises(ValidationError) as ctx:
            as_dtype("int8")
        self.assertIn("Unsupported dtype", str(ctx.exception))
        self.assertEqual(as_dtype("float64"), np.float64)

    def test_conv_params_validation(self):
        """ConvParams rejects bad rank, groups, stride, padding and bias."""
        with self.assertRaises(ShapeError):
            ConvParams(np.zeros((2, 2, 3)))
        with self.assertRaises(ShapeError):
            ConvParams(np.zeros((3, 1, 3, 3)), groups=2)
        with self.assertRaises(ValidationError):
            ConvParams(np.zeros((2, 2, 3, 3)), stride=0)
        with self.assertRaises(ValidationError):
            ConvParams(np.zeros((2, 2, 3, 3)), padding=-1)
        with self.assertRaises(ShapeError):
            ConvParams(np.zeros((2, 2, 3, 3)), bias=np.zeros(3))

    def test_bn_params_validation(self):
        """BnParams rejects ragged vectors, bad eps and negative variance."""
        ones = np.ones(2)
        with self.assertRaises(ShapeError):
            BnParams(ones, ones, ones, np.ones(3))
        with self.assertRaises(ValidationError):
            BnParams(ones, ones, ones, ones, eps=0.0)
        with self.assertRaises(ValidationError):
            BnParams(ones, -ones, ones, ones)

    def test_bn_identity_sigma(self):
        """The identity BN has sigma exactly 1."""
        bn = BnParams.identity(3, dtype="float64")
        np.testing.assert_allclose(bn.sigma(), 1.0)
        self.assertEqual(bn.num_scalars, 12)


if __name__ == "__main__":
    unittest.main()
