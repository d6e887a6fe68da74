"""
Tests for the Aligner.

This module tests masking, the encoder and aligner gradients, the aligner
objective, training, freezing and the word-region diagnostics.
"""

import numpy as np
import pytest

from repgan.core.aligner import (
    AlignerModel,
    DecodeTransform,
    MaskAction,
    aligner_loss,
    aligner_step,
    balance_error,
    balance_error_from_counts,
    decode_consistency,
    decode_words,
    encode_representations,
    mask_batch,
    masked_accuracy,
    reparameterize,
    reparameterize_backward,
    train_aligner,
    variance_spread,
)
from repgan.core.corpus import Vocabulary, encode_batch
from repgan.core.encoder import TransformerEncoder
from repgan.core.numerics import finite_difference_check, make_rng
from repgan.models.training import AlignerObjective, AlignerTrainConfig, PenaltyReduction
from repgan.utils.validation import DegenerateInputError, FrozenParameterError, ShapeMismatchError

TOLERANCE = 1e-4


class TestMasking:
    """Test cases for mask_batch."""

    def test_padding_is_never_selected(self, toy_batch, toy_vocab, rng):
        ids, _ = toy_batch
        masked = mask_batch(ids, toy_vocab, rng, 0.5)
        assert np.all(ids[masked.rows, masked.cols] != toy_vocab.pad_id)
        np.testing.assert_array_equal(masked.corrupted[ids == toy_vocab.pad_id], toy_vocab.pad_id)

    def test_targets_are_the_original_ids(self, toy_batch, toy_vocab, rng):
        ids, _ = toy_batch
        masked = mask_batch(ids, toy_vocab, rng)
        np.testing.assert_array_equal(masked.targets, ids[masked.rows, masked.cols])

    def test_action_proportions(self, toy_sentences, toy_vocab, rng):
        """Selected positions split roughly 80/10/10 and unselected ones stay unchanged."""
        ids, _ = encode_batch(toy_sentences.sentences * 10, toy_vocab, 8)
        masked = mask_batch(ids, toy_vocab, rng)
        selected = masked.actions != MaskAction.KEEP_UNSELECTED
        n = selected.sum()
        assert np.mean(masked.actions[selected] == MaskAction.MASK) == pytest.approx(0.8, abs=0.05)
        assert np.mean(masked.actions[selected] == MaskAction.RANDOM_REPLACE) == pytest.approx(0.1, abs=0.04)
        assert masked.n_targets == n
        np.testing.assert_array_equal(masked.corrupted[~selected], ids[~selected])
        keep = masked.actions == MaskAction.KEEP_SELECTED
        np.testing.assert_array_equal(masked.corrupted[keep], ids[keep])
        np.testing.assert_array_equal(masked.corrupted[masked.actions == MaskAction.MASK], toy_vocab.mask_id)

    def test_random_replacements_are_words(self, toy_sentences, toy_vocab, rng):
        ids, _ = encode_batch(toy_sentences.sentences * 10, toy_vocab, 8)
        masked = mask_batch(ids, toy_vocab, rng)
        replaced = masked.corrupted[masked.actions == MaskAction.RANDOM_REPLACE]
        assert replaced.size > 0
        assert replaced.min() >= toy_vocab.n_reserved
        assert replaced.max() < toy_vocab.size

    def test_every_long_enough_row_gets_a_target(self, toy_vocab):
        """Rows with expected selection count >= 1 always hold a target."""
        ids = np.full((200, 8), toy_vocab.word_ids[0])
        masked = mask_batch(ids, toy_vocab, make_rng(2), 0.15)
        assert set(masked.rows.tolist()) == set(range(200))

    def test_zero_probability_selects_nothing(self, toy_batch, toy_vocab, rng):
        masked = mask_batch(toy_batch[0], toy_vocab, rng, 0.0)
        assert masked.n_targets == 0
        np.testing.assert_array_equal(masked.corrupted, toy_batch[0])

    def test_out_of_range_ids(self, toy_vocab, rng):
        with pytest.raises(DegenerateInputError):
            mask_batch(np.array([[toy_vocab.size]]), toy_vocab, rng)

    def test_empty_batch(self, toy_vocab, rng):
        with pytest.raises(DegenerateInputError):
            mask_batch(np.zeros((0, 4), dtype=np.int64), toy_vocab, rng)


class TestEncoder:
    """Test cases for the self-attention encoder."""

    def _setup(self):
        rng = make_rng(21)
        encoder = TransformerEncoder(12, 8, 10, 2, 2, 6, rng)
        for _, array in encoder.named_parameters():
            array += rng.normal(0.0, 0.05, array.shape)
        ids = np.array([[5, 6, 7, 0, 0, 0], [8, 9, 10, 11, 3, 0]])
        w = rng.standard_normal((2, 6, 8))
        return encoder, ids, ids != 0, w

    def test_parameter_gradients(self):
        encoder, ids, key_mask, w = self._setup()
        features, cache = encoder.forward(ids, key_mask)
        grads = encoder.backward(cache, w)
        params = dict(encoder.named_parameters())

        def f(_):
            return float(np.sum(encoder.forward(ids, key_mask)[0] * w))

        for name in ("blocks.0.W_q", "blocks.0.W_v", "blocks.1.W_1", "blocks.1.ln_ff.gain", "position_embedding"):
            assert finite_difference_check(f, params[name], grads[name]) <= TOLERANCE, name

    def test_padding_keys_do_not_leak(self):
        """Changing the padding embedding leaves non-pad features unchanged."""
        encoder, ids, key_mask, _ = self._setup()
        before, _ = encoder.forward(ids, key_mask)
        encoder.token_embedding[0] += 3.0
        after, _ = encoder.forward(ids, key_mask)
        np.testing.assert_allclose(after[key_mask], before[key_mask], atol=1e-12)

    def test_sequence_longer_than_positions(self):
        encoder = TransformerEncoder(12, 8, 10, 1, 2, 4, make_rng(0))
        ids = np.full((1, 5), 5)
        with pytest.raises(ShapeMismatchError):
            encoder.forward(ids, ids != 0)

    def test_heads_must_divide_width(self):
        with pytest.raises(DegenerateInputError):
            TransformerEncoder(12, 8, 10, 1, 3, 4, make_rng(0))


class TestAlignerObjective:
    """Test cases for aligner_loss and the reparameterization."""

    def _terms(self, rng, n=4, e=3, v=7):
        return (
            rng.standard_normal((n, v)),
            rng.integers(v, size=n),
            rng.standard_normal((n, e)),
            rng.normal(0.0, 0.5, (n, e)),
        )

    @pytest.mark.parametrize("reduction", list(PenaltyReduction))
    def test_gradients(self, rng, reduction):
        logits, targets, mu, logvar = self._terms(rng)
        terms = aligner_loss(logits, targets, mu, logvar, 0.3, reduction=reduction)
        loss = lambda lg, m, lv: aligner_loss(lg, targets, m, lv, 0.3, reduction=reduction).loss  # noqa: E731
        assert finite_difference_check(lambda x: loss(x, mu, logvar), logits, terms.dlogits) <= TOLERANCE
        assert finite_difference_check(lambda x: loss(logits, x, logvar), mu, terms.dmu) <= TOLERANCE
        assert finite_difference_check(lambda x: loss(logits, mu, x), logvar, terms.dlogvar) <= TOLERANCE

    def test_mean_reduction_divides_penalty_by_width(self, rng):
        logits, targets, mu, logvar = self._terms(rng)
        summed = aligner_loss(logits, targets, mu, logvar, 0.5, reduction=PenaltyReduction.SUM)
        averaged = aligner_loss(logits, targets, mu, logvar, 0.5, reduction=PenaltyReduction.MEAN)
        assert averaged.penalty == pytest.approx(summed.penalty / 3)

    def test_penalty_defaults_to_mean_over_positions_and_dims(self):
        terms = aligner_loss(np.zeros((1, 6)), np.array([0]), np.zeros((1, 4)), np.ones((1, 4)), 0.1)
        assert terms.penalty == pytest.approx(0.1, abs=1e-7)
        assert AlignerTrainConfig().penalty_reduction == PenaltyReduction.MEAN

    def test_kl_vanishes_at_the_prior(self, rng):
        logits, targets, mu, logvar = self._terms(rng)
        terms = aligner_loss(logits, targets, np.zeros_like(mu), np.zeros_like(logvar), 0.0)
        assert terms.kl == pytest.approx(0.0)
        assert terms.loss == pytest.approx(terms.reconstruction)

    def test_cross_entropy_objective_drops_regularizers(self, rng):
        logits, targets, mu, logvar = self._terms(rng)
        terms = aligner_loss(logits, targets, mu, logvar, 0.3, objective=AlignerObjective.CROSS_ENTROPY)
        assert terms.kl == 0.0 and terms.penalty == 0.0
        np.testing.assert_array_equal(terms.dmu, 0.0)

    def test_rejects_negative_weight_and_no_targets(self, rng):
        logits, targets, mu, logvar = self._terms(rng)
        with pytest.raises(DegenerateInputError):
            aligner_loss(logits, targets, mu, logvar, -0.1)
        with pytest.raises(DegenerateInputError):
            aligner_loss(logits[:0], targets[:0], mu[:0], logvar[:0], 0.1)

    def test_reparameterization_gradient(self, rng):
        mu = rng.standard_normal((3, 2))
        logvar = rng.standard_normal((3, 2)) * 0.3
        noise = rng.standard_normal((3, 2))
        w = rng.standard_normal((3, 2))
        dmu, dlogvar = reparameterize_backward(logvar, noise, w)
        f = lambda m, lv: float(np.sum(reparameterize(m, lv, noise=noise) * w))  # noqa: E731
        assert finite_difference_check(lambda x: f(x, logvar), mu, dmu) <= TOLERANCE
        assert finite_difference_check(lambda x: f(mu, x), logvar, dlogvar) <= TOLERANCE

    def test_reparameterization_needs_randomness(self):
        with pytest.raises(DegenerateInputError):
            reparameterize(np.zeros(2), np.zeros(2))


class TestAlignerModel:
    """Test cases for AlignerModel training and diagnostics."""

    @pytest.mark.parametrize("objective", list(AlignerObjective))
    def test_step_gradients(self, tiny_aligner, toy_batch, toy_vocab, objective):
        """Full-model gradients match finite differences with the sampling noise held fixed."""
        ids, _ = toy_batch
        masked = mask_batch(ids[:4], toy_vocab, make_rng(8), 0.3)
        config = AlignerTrainConfig(lambda_a=0.2, objective=objective)
        stream = (lambda: make_rng(9)) if objective == AlignerObjective.VARIANCE_PENALIZED else (lambda: None)
        step = aligner_step(tiny_aligner, masked, config, stream())
        params = dict(tiny_aligner.named_parameters())

        def f(_):
            return aligner_step(tiny_aligner, masked, config, stream()).loss.loss

        for name in ("mu.W", "logvar.b", "f_lt.W", "encoder.blocks.0.W_k", "encoder.token_embedding"):
            assert finite_difference_check(f, params[name], step.grads[name]) <= TOLERANCE, name

    def test_training_lowers_loss_and_freezes(self, tiny_aligner, toy_sentences, toy_vocab):
        ids, _ = encode_batch(toy_sentences.sentences, toy_vocab, 8)
        config = AlignerTrainConfig(
            epochs=6, batch_size=32, lr=1e-2, objective=AlignerObjective.CROSS_ENTROPY
        )
        result = train_aligner(tiny_aligner, ids, toy_vocab, config, make_rng(1))
        assert result.epochs_run == 6
        assert result.trace[-1].loss < result.trace[0].loss
        assert result.model.frozen
        with pytest.raises(ValueError):
            result.model.f_lt_W[0, 0] = 1.0
        with pytest.raises(FrozenParameterError):
            train_aligner(result.model, ids, toy_vocab, config, make_rng(1))

    def test_target_accuracy_stops_early(self, tiny_aligner, toy_batch, toy_vocab, monkeypatch):
        monkeypatch.setattr("repgan.core.aligner.masked_accuracy", lambda *args, **kwargs: 0.97)
        config = AlignerTrainConfig(epochs=5, batch_size=8, target_accuracy=0.95)
        result = train_aligner(tiny_aligner, toy_batch[0], toy_vocab, config, make_rng(1))
        assert result.epochs_run == 1
        assert len(result.trace) == 1

    @pytest.mark.slow
    def test_reaches_masked_accuracy_on_a_phrasebook_corpus(self):
        """Masked words that the context determines are recovered at >= 95% within 200 epochs."""
        phrases = [[f"p{t}w{i}" for i in range(4 + t % 3)] for t in range(12)]
        rng = make_rng(21)
        sentences = [phrases[k] for k in rng.integers(len(phrases), size=2000)]
        vocab = Vocabulary.build(sentences)
        ids, _ = encode_batch(sentences, vocab, 8)
        model = AlignerModel(
            vocab_size=vocab.size,
            width=32,
            rep_dim=16,
            ff_width=64,
            layers=1,
            heads=2,
            max_len=8,
            dropout=0.0,
            rng=make_rng(22),
            n_reserved=vocab.n_reserved,
        )
        config = AlignerTrainConfig(epochs=200, batch_size=32, lr=1e-3, target_accuracy=0.98)
        result = train_aligner(model, ids, vocab, config, make_rng(23))
        assert result.epochs_run <= 200
        assert result.trace[-1].accuracy >= 0.95
        assert masked_accuracy(result.model, ids, vocab, make_rng(24)) >= 0.95

    def test_real_representations_are_means(self, frozen_aligner, toy_batch):
        ids, _ = toy_batch
        reps = encode_representations(frozen_aligner, ids, chunk=5)
        mu, _, _ = frozen_aligner.forward(ids)
        assert reps.shape == (16, 8, 6)
        np.testing.assert_allclose(reps, mu)

    def test_masked_accuracy_range(self, frozen_aligner, toy_batch, toy_vocab):
        accuracy = masked_accuracy(frozen_aligner, toy_batch[0], toy_vocab, make_rng(0))
        assert 0.0 <= accuracy <= 1.0

    def test_architecture_round_trip(self, tiny_aligner):
        skeleton = AlignerModel.from_architecture(tiny_aligner.architecture())
        assert [n for n, _ in skeleton.named_parameters()] == [n for n, _ in tiny_aligner.named_parameters()]


class TestWordRegions:
    """Test cases for decoding and the balance diagnostics."""

    def test_decode_ties_resolve_to_lowest_id(self):
        f_lt = DecodeTransform(W=np.zeros((2, 4)), b=np.array([0.0, 1.0, 1.0, 0.5]))
        np.testing.assert_array_equal(decode_words(f_lt, np.zeros((3, 2))), [1, 1, 1])

    def test_decode_width_mismatch(self):
        f_lt = DecodeTransform(W=np.zeros((2, 4)), b=np.zeros(4))
        with pytest.raises(ShapeMismatchError):
            decode_words(f_lt, np.zeros((1, 3)))

    def test_balance_error_from_counts(self):
        assert balance_error_from_counts(np.array([50, 50]), 100) == 0.0
        assert balance_error_from_counts(np.array([0, 100]), 100) == 50.0

    def test_balance_error_is_bounded(self, frozen_aligner):
        error = balance_error(frozen_aligner, 20, 10, make_rng(0))
        assert 0.0 <= error <= 5.0

    def test_balance_error_is_seeded(self, frozen_aligner):
        assert balance_error(frozen_aligner, 10, 10, make_rng(3)) == balance_error(frozen_aligner, 10, 10, make_rng(3))

    def test_region_diagnostics(self, frozen_aligner):
        assert variance_spread(frozen_aligner) >= 0.0
        assert 0.0 <= decode_consistency(frozen_aligner) <= 1.0
