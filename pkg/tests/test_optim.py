"""
Tests for Optimizers.

This module tests the adaptive-moment optimizer and the global-norm
helpers.
"""

import numpy as np
import pytest

from repgan.core.optim import Adam, clip_by_global_norm, global_norm
from repgan.utils.validation import FrozenParameterError


class TestGlobalNorm:
    """Test cases for global-norm helpers."""

    def test_norm_over_all_arrays(self):
        assert global_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == pytest.approx(5.0)

    def test_clipping_rescales_in_place(self):
        """Gradients above the limit are scaled down to it."""
        grads = {"a": np.array([3.0, 4.0])}
        before = clip_by_global_norm(grads, 1.0)
        assert before == pytest.approx(5.0)
        assert global_norm(grads) == pytest.approx(1.0, rel=1e-9)

    def test_no_clipping_below_limit(self):
        grads = {"a": np.array([0.3, 0.4])}
        clip_by_global_norm(grads, 1.0)
        np.testing.assert_array_equal(grads["a"], [0.3, 0.4])


class TestAdam:
    """Test cases for Adam."""

    def test_first_step_moves_by_learning_rate(self):
        """Bias correction makes the first step lr * sign(g)."""
        p = np.array([1.0, -1.0])
        Adam({"p": p}, lr=0.1).step({"p": np.array([2.0, -0.5])})
        np.testing.assert_allclose(p, [0.9, -0.9], atol=1e-6)

    def test_minimizes_a_quadratic(self):
        p = np.array([5.0, -3.0])
        opt = Adam({"p": p}, lr=0.1)
        for _ in range(1000):
            opt.step({"p": 2.0 * p})
        np.testing.assert_allclose(p, 0.0, atol=5e-2)

    def test_decoupled_weight_decay(self):
        """With a zero gradient only the decay acts."""
        p = np.array([2.0])
        Adam({"p": p}, lr=0.1, weight_decay=0.5).step({"p": np.array([0.0])})
        np.testing.assert_allclose(p, [2.0 * (1 - 0.05)])

    def test_missing_gradient_leaves_parameter(self):
        p = np.array([1.0])
        q = np.array([1.0])
        Adam({"p": p, "q": q}, lr=0.1).step({"p": np.array([1.0])})
        assert q[0] == 1.0

    def test_frozen_parameter_is_refused(self):
        p = np.array([1.0])
        p.flags.writeable = False
        with pytest.raises(FrozenParameterError):
            Adam({"p": p}, lr=0.1).step({"p": np.array([1.0])})
