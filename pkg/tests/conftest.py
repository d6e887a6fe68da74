"""
Pytest Configuration and Fixtures.

This module provides common fixtures for the test suite: seeded random
streams, a small grammar corpus with its vocabulary, tiny models and a
tiny run configuration.
"""

import numpy as np
import pytest

from repgan.config.settings import DESK_PRESET, RunConfig
from repgan.core.aligner import AlignerModel
from repgan.core.corpus import Vocabulary, encode_batch
from repgan.core.gan import Discriminator, Generator
from repgan.core.grammar import default_grammar, gen_synthetic_corpus
from repgan.core.numerics import make_rng
from repgan.models.corpus import SentenceSet
from repgan.models.training import LstmVariant

TINY_MAX_LEN = 8


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded random stream."""
    return make_rng(1234)


@pytest.fixture(scope="session")
def grammar():
    """The built-in grammar."""
    return default_grammar()


@pytest.fixture(scope="session")
def toy_sentences(grammar) -> SentenceSet:
    """Two hundred grammar sentences."""
    return gen_synthetic_corpus(grammar, 200, make_rng(0))


@pytest.fixture(scope="session")
def toy_vocab(toy_sentences) -> Vocabulary:
    """Vocabulary of the toy corpus."""
    return Vocabulary.build(toy_sentences.sentences)


@pytest.fixture
def toy_batch(toy_sentences, toy_vocab):
    """Encoded toy corpus, ``(ids, lengths)``."""
    return encode_batch(toy_sentences.sentences[:16], toy_vocab, TINY_MAX_LEN)


@pytest.fixture
def tiny_aligner(toy_vocab) -> AlignerModel:
    """Untrained aligner with dropout disabled."""
    return AlignerModel(
        vocab_size=toy_vocab.size,
        width=8,
        rep_dim=6,
        ff_width=16,
        layers=1,
        heads=2,
        max_len=TINY_MAX_LEN,
        dropout=0.0,
        rng=make_rng(3),
        n_reserved=toy_vocab.n_reserved,
    )


@pytest.fixture
def frozen_aligner(tiny_aligner) -> AlignerModel:
    tiny_aligner.freeze()
    return tiny_aligner


@pytest.fixture
def tiny_generator(frozen_aligner, toy_vocab) -> Generator:
    """Small fully normalized generator decoding through the frozen aligner."""
    return Generator(
        vocab_size=toy_vocab.size,
        embed_dim=6,
        noise_dim=3,
        hidden_dim=5,
        depth=2,
        f_lt=frozen_aligner.f_lt,
        rho=0.5,
        rng=make_rng(5),
        variant=LstmVariant.FULLY_NORMALIZED,
        bos_id=toy_vocab.bos_id,
        eos_id=toy_vocab.eos_id,
        pad_id=toy_vocab.pad_id,
    )


@pytest.fixture
def tiny_discriminator() -> Discriminator:
    """Small fully normalized critic over 6-dimensional representations."""
    return Discriminator.init(6, 4, 2, LstmVariant.FULLY_NORMALIZED, make_rng(7))


@pytest.fixture
def tiny_config() -> RunConfig:
    """A run configuration small enough for end-to-end tests."""
    values = dict(DESK_PRESET)
    values.update(
        grammar_size=160,
        max_len=TINY_MAX_LEN,
        valid_fraction=0.1,
        test_fraction=0.2,
        embed_dim=8,
        rep_dim=6,
        noise_dim=3,
        gen_hidden=6,
        disc_hidden=6,
        gen_layers=1,
        disc_layers=1,
        aligner_layers=1,
        aligner_heads=2,
        aligner_ff_dim=16,
        aligner_dropout=0.0,
        batch_size=8,
        aligner_epochs=2,
        aligner_target_accuracy=None,
        gan_epochs=1,
        gan_max_steps=3,
        eval_every=None,
        mle_epochs=1,
        eval_token_size=20,
        eval_embed_size=24,
        validation_size=10,
        hash_dim=32,
        seeds=[0],
        probe_batches=3,
        probe_batch_size=4,
        probe_len=4,
        probe_input_dim=8,
        probe_hidden=8,
        probe_seeds=[0, 1],
        dropout_rates=[0.0, 0.5],
        corruption_rates=[0.0, 0.05, 0.1],
        sensitivity_size=60,
        sensitivity_seeds=[0, 1],
        lambda_a_values=[0.0, 0.1],
        n_pairs=5,
        n_interp=10,
        gate_hidden=8,
        gate_trials=2,
    )
    return RunConfig(**values)
