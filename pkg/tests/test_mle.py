"""
Tests for the Maximum-Likelihood Comparison Model.
"""

import numpy as np
import pytest

from repgan.core.corpus import encode_batch
from repgan.core.mle import MleModel, mle_loss, sample_mle, train_mle
from repgan.core.numerics import finite_difference_check, make_rng
from repgan.models.training import MleTrainConfig
from repgan.utils.validation import DataError, DegenerateInputError


@pytest.fixture
def mle_model(toy_vocab) -> MleModel:
    return MleModel(toy_vocab.size, 6, 5, 2, make_rng(2))


class TestMleModel:
    """Test cases for teacher forcing and sampling."""

    def test_loss_gradients(self, mle_model, toy_batch):
        ids, lengths = toy_batch
        ids, lengths = ids[:3], lengths[:3]
        _, grads = mle_loss(mle_model, ids, lengths)
        params = dict(mle_model.named_parameters())

        def f(_):
            return mle_loss(mle_model, ids, lengths)[0]

        for name in ("out.W", "out.b", "embedding", "stack.layers.0.W_x", "stack.layers.1.ln_out.gain"):
            assert finite_difference_check(f, params[name], grads[name]) <= 1e-4, name

    def test_padding_does_not_count(self, mle_model, toy_batch):
        """Changing targets after the length leaves the loss unchanged."""
        ids, lengths = toy_batch
        ids = ids.copy()
        loss, _ = mle_loss(mle_model, ids, lengths)
        short = lengths < ids.shape[1]
        ids[short, -1] = 7
        assert mle_loss(mle_model, ids, lengths)[0] == pytest.approx(loss)

    def test_training_lowers_loss(self, mle_model, toy_sentences, toy_vocab):
        ids, lengths = encode_batch(toy_sentences.sentences, toy_vocab, 8)
        result = train_mle(mle_model, ids, lengths, MleTrainConfig(epochs=4, batch_size=32, lr=1e-2), make_rng(0))
        assert len(result.trace) == 4
        assert result.trace[-1].loss < result.trace[0].loss

    def test_training_needs_data(self, mle_model):
        with pytest.raises(DataError):
            train_mle(mle_model, np.zeros((0, 4), dtype=np.int64), np.zeros(0), MleTrainConfig(), make_rng(0))

    def test_samples_are_padded_after_eos(self, mle_model):
        tokens, lengths = sample_mle(mle_model, 20, 8, make_rng(1))
        assert tokens.shape == (20, 8)
        for row, length in zip(tokens, lengths):
            np.testing.assert_array_equal(row[length:], mle_model.pad_id)

    def test_sampling_is_seeded(self, mle_model):
        a, _ = sample_mle(mle_model, 5, 6, make_rng(9))
        b, _ = sample_mle(mle_model, 5, 6, make_rng(9))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("kwargs", [{"n": 0}, {"steps": 0}, {"temperature": 0.0}])
    def test_sampling_rejects(self, mle_model, kwargs):
        args = {"n": 2, "steps": 3, "temperature": 1.0}
        args.update(kwargs)
        with pytest.raises(DegenerateInputError):
            sample_mle(mle_model, args["n"], args["steps"], make_rng(0), args["temperature"])
