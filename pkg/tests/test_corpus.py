"""
Tests for the Corpus Pipeline.

This module tests vocabulary construction, corpus loading, splitting and
padded encoding.
"""

import logging

import numpy as np
import pytest
from pydantic import ValidationError

from repgan.core.corpus import (
    RESERVED_TOKENS,
    UNK,
    Vocabulary,
    decode_batch,
    encode_batch,
    load_corpus,
    load_sentences,
    sample_subset,
    split_corpus,
    write_sentences,
)
from repgan.models.corpus import SentenceSet
from repgan.models.training import Provenance
from repgan.utils.validation import DataError, DegenerateInputError


@pytest.fixture
def propagate_logs(monkeypatch):
    """Let package records reach caplog even after setup_logging ran."""
    monkeypatch.setattr(logging.getLogger("repgan"), "propagate", True)


class TestVocabulary:
    """Test cases for Vocabulary."""

    def test_frequency_then_lexicographic_order(self):
        """The most frequent word comes first; ties sort lexicographically."""
        vocab = Vocabulary.build([["a", "b"], ["b", "c"]])
        assert vocab.tokens[: len(RESERVED_TOKENS)] == list(RESERVED_TOKENS)
        assert vocab.tokens[5:] == ["b", "a", "c"]

    def test_reserved_ids(self):
        vocab = Vocabulary.build([["x"]])
        assert (vocab.pad_id, vocab.mask_id, vocab.bos_id, vocab.eos_id, vocab.unk_id) == (0, 1, 2, 3, 4)
        np.testing.assert_array_equal(vocab.word_ids, [5])

    def test_reserved_tokens_in_text_are_not_words(self):
        vocab = Vocabulary.build([["[PAD]", "x", "[EOS]"]])
        assert vocab.size == len(RESERVED_TOKENS) + 1

    def test_missing_reserved_prefix(self):
        with pytest.raises(DataError):
            Vocabulary(["a", "b"])

    def test_duplicate_tokens(self):
        with pytest.raises(DataError):
            Vocabulary(list(RESERVED_TOKENS) + ["a", "a"])

    def test_unknown_words_encode_to_unk(self):
        vocab = Vocabulary.build([["a"]])
        assert vocab.encode(["a", "zzz"]) == [5, vocab.unk_id]

    def test_decode_stops_at_eos_and_drops_padding(self):
        vocab = Vocabulary.build([["a", "b"]])
        ids = [vocab.index["a"], vocab.pad_id, vocab.index["b"], vocab.eos_id, vocab.index["a"]]
        assert vocab.decode(ids) == ["a", "b"]
        assert vocab.decode(ids, stop_at_eos=False) == ["a", "b", "[EOS]", "a"]


class TestLoading:
    """Test cases for reading corpora from disk."""

    def test_empty_lines_are_skipped_with_warning(self, tmp_path, caplog, propagate_logs):
        path = tmp_path / "corpus.txt"
        path.write_text("the cat sleeps\n\n  \nthe dog runs\n", encoding="utf-8")
        with caplog.at_level(logging.WARNING, logger="repgan.core.corpus"):
            sentences = load_sentences(path)
        assert sentences.sentences == [["the", "cat", "sleeps"], ["the", "dog", "runs"]]
        assert "Skipping empty line 2" in caplog.text

    def test_invalid_utf8_is_a_data_error(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_bytes(b"ok line\n\xff\xfe broken\n")
        with pytest.raises(DataError):
            load_sentences(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_sentences(tmp_path / "absent.txt")

    def test_corpus_without_sentences(self, tmp_path):
        path = tmp_path / "blank.txt"
        path.write_text("\n\n", encoding="utf-8")
        with pytest.raises(DataError):
            load_sentences(path)

    def test_load_corpus_builds_vocabulary(self, tmp_path):
        path = tmp_path / "corpus.txt"
        write_sentences(path, SentenceSet(sentences=[["a", "b"], ["b", "c"]]))
        sentences, vocab = load_corpus(path)
        assert len(sentences) == 2
        assert vocab.tokens[5] == "b"

    def test_empty_sentence_is_rejected(self):
        with pytest.raises(ValidationError):
            SentenceSet(sentences=[["a"], []])


class TestSplitAndEncode:
    """Test cases for splitting, sampling and encoding."""

    def test_split_sizes_and_disjointness(self, toy_sentences, rng):
        train, valid, test = split_corpus(toy_sentences, 0.1, 0.2, rng)
        assert (len(train), len(valid), len(test)) == (140, 20, 40)
        assert valid.provenance == Provenance.VALID
        assert test.provenance == Provenance.TEST
        assert len(train) + len(valid) + len(test) == len(toy_sentences)

    def test_split_is_seeded(self, toy_sentences):
        from repgan.core.numerics import make_rng

        a = split_corpus(toy_sentences, 0.1, 0.1, make_rng(4))[1]
        b = split_corpus(toy_sentences, 0.1, 0.1, make_rng(4))[1]
        assert a.sentences == b.sentences

    @pytest.mark.parametrize("fractions", [(0.5, 0.5), (-0.1, 0.2), (0.9, 0.2)])
    def test_invalid_fractions(self, toy_sentences, rng, fractions):
        with pytest.raises(DegenerateInputError):
            split_corpus(toy_sentences, *fractions, rng)

    def test_encode_truncates_to_fit_eos(self):
        vocab = Vocabulary.build([["a", "b", "c", "d"]])
        ids, lengths = encode_batch([["a", "b", "c", "d"], ["a"]], vocab, 4)
        assert ids.shape == (2, 4)
        assert ids[0, -1] == vocab.eos_id
        assert list(ids[1]) == [vocab.index["a"], vocab.eos_id, vocab.pad_id, vocab.pad_id]
        np.testing.assert_array_equal(lengths, [4, 2])

    def test_encode_without_eos(self):
        vocab = Vocabulary.build([["a", "b"]])
        ids, lengths = encode_batch([["a", "b"]], vocab, 2, append_eos=False)
        assert list(ids[0]) == [vocab.index["a"], vocab.index["b"]]
        assert lengths[0] == 2

    def test_decode_batch_of_empty_rows(self):
        vocab = Vocabulary.build([["a"]])
        decoded = decode_batch(np.array([[vocab.eos_id, 5], [5, vocab.eos_id]]), vocab)
        assert decoded.sentences == [[UNK], ["a"]]
        assert decoded.provenance == Provenance.GENERATED

    def test_sample_subset(self, toy_sentences, rng):
        assert len(sample_subset(toy_sentences, 30, rng)) == 30
        assert sample_subset(toy_sentences, None, rng) is toy_sentences
        assert sample_subset(toy_sentences, 10_000, rng) is toy_sentences
