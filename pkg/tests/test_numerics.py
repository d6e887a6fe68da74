"""
Tests for Numerical Primitives.

This module checks layer normalization, affine maps, activations, the
softmax cross-entropy, dropout masks and random streams, mostly against
central finite differences.
"""

import numpy as np
import pytest

from repgan.core.numerics import (
    LayerNormParams,
    affine,
    affine_backward,
    child_seed,
    dropout_mask,
    finite_difference_check,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    ln_gradient_factor_probe,
    make_rng,
    restore_rng,
    rng_state,
    sigmoid,
    sigmoid_backward,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
    spawn_rngs,
    tanh,
    tanh_backward,
)
from repgan.utils.validation import DegenerateInputError, ShapeMismatchError

PRIMITIVE_TOLERANCE = 1e-5


class TestRandomStreams:
    """Test cases for seeded generators."""

    def test_same_seed_same_stream(self):
        """Two generators from one seed produce identical draws."""
        np.testing.assert_array_equal(make_rng(7).random(5), make_rng(7).random(5))

    def test_spawned_streams_are_stable_and_distinct(self):
        """Child k depends only on (seed, k) and children differ."""
        a = spawn_rngs(3, 3)
        b = spawn_rngs(3, 2)
        np.testing.assert_array_equal(a[1].random(4), b[1].random(4))
        assert not np.array_equal(spawn_rngs(3, 2)[0].random(4), spawn_rngs(3, 2)[1].random(4))

    def test_state_round_trip(self):
        """A restored state continues the original stream."""
        rng = make_rng(11)
        rng.random(3)
        state = rng_state(rng)
        expected = rng.random(6)
        np.testing.assert_array_equal(restore_rng(state).random(6), expected)

    def test_child_seed_is_non_negative(self):
        assert 0 <= child_seed(make_rng(0)) < 2**63


class TestLayerNorm:
    """Test cases for layer normalization."""

    def test_output_is_normalized(self, rng):
        """Unit gain and zero bias give zero mean and unit variance rows."""
        x = rng.normal(3.0, 2.0, (4, 16))
        y, _ = layer_norm(x, LayerNormParams.identity(16, epsilon=0.0))
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, rtol=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_input_gradient_matches_finite_differences(self, seed):
        """dx matches central differences, including mean and deviation coupling."""
        rng = make_rng(seed)
        params = LayerNormParams(gain=rng.normal(1.0, 0.3, 6), bias=rng.normal(0.0, 0.3, 6))
        x = rng.standard_normal((3, 6))
        w = rng.standard_normal((3, 6))
        _, cache = layer_norm(x, params)
        dx, _, _ = layer_norm_backward(cache, w)
        err = finite_difference_check(lambda v: float(np.sum(layer_norm(v, params)[0] * w)), x, dx)
        assert err <= PRIMITIVE_TOLERANCE

    def test_parameter_gradients_match_finite_differences(self, rng):
        params = LayerNormParams(gain=rng.normal(1.0, 0.3, 5), bias=rng.normal(0.0, 0.3, 5))
        x = rng.standard_normal((4, 5))
        w = rng.standard_normal((4, 5))
        _, cache = layer_norm(x, params)
        _, dgain, dbias = layer_norm_backward(cache, w)

        def f(_):
            return float(np.sum(layer_norm(x, params)[0] * w))

        assert finite_difference_check(f, params.gain, dgain) <= PRIMITIVE_TOLERANCE
        assert finite_difference_check(f, params.bias, dbias) <= PRIMITIVE_TOLERANCE

    def test_constant_input_with_zero_epsilon_is_rejected(self):
        """Zero variance cannot be normalized without epsilon."""
        with pytest.raises(DegenerateInputError):
            layer_norm(np.ones((2, 4)), LayerNormParams.identity(4, epsilon=0.0))

    def test_width_mismatch(self, rng):
        with pytest.raises(ShapeMismatchError):
            layer_norm(rng.standard_normal((2, 5)), LayerNormParams.identity(4))

    @pytest.mark.parametrize("sigma", [0.25, 0.5, 0.8, 1.0])
    def test_gradient_factor_is_inverse_deviation(self, sigma):
        """The input Jacobian diagonal is close to 1/sigma for wide inputs."""
        factor = ln_gradient_factor_probe(1024, sigma, 3, make_rng(0))
        assert factor == pytest.approx(1.0 / sigma, rel=0.05)

    def test_probe_needs_a_wide_input(self):
        with pytest.raises(DegenerateInputError):
            ln_gradient_factor_probe(16, 0.5, 1, make_rng(0))


class TestAffineAndActivations:
    """Test cases for affine maps and element-wise activations."""

    def test_affine_gradients(self, rng):
        x = rng.standard_normal((2, 3, 4))
        W = rng.standard_normal((4, 5))
        b = rng.standard_normal(5)
        w = rng.standard_normal((2, 3, 5))
        _, cache = affine(x, W, b)
        dx, dW, db = affine_backward(cache, w)
        assert finite_difference_check(lambda v: float(np.sum(affine(v, W, b)[0] * w)), x, dx) <= PRIMITIVE_TOLERANCE
        assert finite_difference_check(lambda v: float(np.sum(affine(x, v, b)[0] * w)), W, dW) <= PRIMITIVE_TOLERANCE
        assert finite_difference_check(lambda v: float(np.sum(affine(x, W, v)[0] * w)), b, db) <= PRIMITIVE_TOLERANCE

    def test_affine_shape_check(self, rng):
        with pytest.raises(ShapeMismatchError):
            affine(rng.standard_normal((2, 3)), rng.standard_normal((4, 5)), np.zeros(5))

    def test_sigmoid_and_tanh_gradients(self, rng):
        x = rng.standard_normal(7)
        w = rng.standard_normal(7)
        d_sig = sigmoid_backward(sigmoid(x), w)
        d_tanh = tanh_backward(tanh(x), w)
        assert finite_difference_check(lambda v: float(np.sum(sigmoid(v) * w)), x, d_sig) <= PRIMITIVE_TOLERANCE
        assert finite_difference_check(lambda v: float(np.sum(tanh(v) * w)), x, d_tanh) <= PRIMITIVE_TOLERANCE

    def test_gelu_gradient(self, rng):
        x = rng.standard_normal(9) * 2.0
        w = rng.standard_normal(9)
        dx = gelu_backward(x, w)
        assert finite_difference_check(lambda v: float(np.sum(gelu(v) * w)), x, dx) <= PRIMITIVE_TOLERANCE

    def test_sigmoid_is_stable_for_large_inputs(self):
        y = sigmoid(np.array([-1000.0, 1000.0]))
        np.testing.assert_array_equal(y, [0.0, 1.0])


class TestSoftmaxCrossEntropy:
    """Test cases for the softmax cross-entropy."""

    def test_uniform_logits(self):
        """Equal logits cost log V."""
        loss, _ = softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
        assert loss == pytest.approx(np.log(4.0))

    def test_gradient_matches_finite_differences(self, rng):
        logits = rng.standard_normal((5, 6))
        targets = rng.integers(6, size=5)
        weights = rng.random(5)
        _, cache = softmax_cross_entropy(logits, targets, weights)
        grad = softmax_cross_entropy_backward(cache)
        err = finite_difference_check(lambda v: softmax_cross_entropy(v, targets, weights)[0], logits, grad)
        assert err <= PRIMITIVE_TOLERANCE

    def test_large_logits_stay_finite(self):
        loss, _ = softmax_cross_entropy(np.array([[1000.0, -1000.0]]), np.array([1]))
        assert loss == pytest.approx(2000.0)

    def test_out_of_range_target(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros((1, 3)), np.array([3]))


class TestDropoutMask:
    """Test cases for sub-model selection masks."""

    def test_zero_rate_keeps_everything(self, rng):
        np.testing.assert_array_equal(dropout_mask((3, 4), 0.0, rng), np.ones((3, 4)))

    def test_no_rescaling(self, rng):
        """Kept entries are exactly one."""
        mask = dropout_mask(1000, 0.75, rng)
        assert set(np.unique(mask)) <= {0.0, 1.0}
        assert mask.mean() == pytest.approx(0.25, abs=0.05)

    def test_rate_of_one_is_rejected(self, rng):
        with pytest.raises(DegenerateInputError):
            dropout_mask(4, 1.0, rng)


class TestFiniteDifferenceOracle:
    """Test cases for the gradient oracle itself."""

    def test_detects_a_wrong_gradient(self, rng):
        x = rng.standard_normal(4)
        assert finite_difference_check(lambda v: float(np.sum(v**2)), x, 2 * x) < 1e-7
        assert finite_difference_check(lambda v: float(np.sum(v**2)), x, 3 * x) > 0.1

    def test_restores_the_input(self, rng):
        x = rng.standard_normal(3)
        before = x.copy()
        finite_difference_check(lambda v: float(np.sum(v)), x, np.ones(3))
        np.testing.assert_array_equal(x, before)
