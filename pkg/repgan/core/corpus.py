"""
Corpus Pipeline.

This module reads plain-text corpora (one sentence per line, whitespace
tokenized), builds vocabularies with reserved special tokens, splits
sentence sets and encodes them into padded id matrices.
"""

import logging
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..models.corpus import SentenceSet
from ..models.training import Provenance
from ..utils.validation import DataError, DegenerateInputError

logger = logging.getLogger(__name__)

PAD = "[PAD]"
MASK = "[MASK]"
BOS = "[BOS]"
EOS = "[EOS]"
UNK = "[UNK]"
RESERVED_TOKENS = (PAD, MASK, BOS, EOS, UNK)


class Vocabulary:
    """Dense token/id mapping with the reserved tokens at ids ``0..4``."""

    def __init__(self, tokens: Sequence[str]):
        """
        Initialize from an explicit id-ordered token list.

        Args:
            tokens: Tokens in id order; must start with the reserved tokens
        """
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise DataError("vocabulary must begin with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary tokens must be distinct")
        self.tokens: List[str] = list(tokens)
        self.index: Dict[str, int] = {token: i for i, token in enumerate(self.tokens)}

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]]) -> "Vocabulary":
        """
        Build from training sentences.

        Ids after the reserved block are assigned by descending frequency,
        ties broken lexicographically.
        """
        counts = Counter(token for sentence in sentences for token in sentence)
        for reserved in RESERVED_TOKENS:
            counts.pop(reserved, None)
        ordered = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
        return cls(list(RESERVED_TOKENS) + [token for token, _ in ordered])

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def mask_id(self) -> int:
        return 1

    @property
    def bos_id(self) -> int:
        return 2

    @property
    def eos_id(self) -> int:
        return 3

    @property
    def unk_id(self) -> int:
        return 4

    @property
    def n_reserved(self) -> int:
        return len(RESERVED_TOKENS)

    @property
    def word_ids(self) -> np.ndarray:
        """Ids of all non-reserved tokens."""
        return np.arange(self.n_reserved, self.size)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.index.get(token, self.unk_id) for token in tokens]

    def decode(self, ids: Iterable[int], stop_at_eos: bool = True) -> List[str]:
        """Map ids back to tokens, dropping padding and stopping at ``[EOS]``."""
        out = []
        for i in ids:
            i = int(i)
            if stop_at_eos and i == self.eos_id:
                break
            if i == self.pad_id:
                continue
            out.append(self.tokens[i])
        return out


def read_lines(path: Path) -> List[str]:
    """Read a UTF-8 text file strictly."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"{path} is not valid UTF-8: {e}") from e
    return text.splitlines()


def load_sentences(path: Path, provenance: Provenance = Provenance.TRAIN) -> SentenceSet:
    """Load a sentence file, skipping blank lines with a warning."""
    sentences = []
    for number, line in enumerate(read_lines(path), start=1):
        tokens = line.split()
        if not tokens:
            logger.warning(f"Skipping empty line {number} in {path}")
            continue
        sentences.append(tokens)
    if not sentences:
        raise DataError(f"corpus {path} contains no sentences")
    logger.info(f"Loaded {len(sentences)} sentences from {path}")
    return SentenceSet(sentences=sentences, provenance=provenance)


def load_corpus(path: Path) -> Tuple[SentenceSet, Vocabulary]:
    """
    Load a corpus and build its vocabulary.

    Args:
        path: UTF-8 text, one sentence per line

    Returns:
        Sentence set and the vocabulary built from it
    """
    sentences = load_sentences(path)
    vocab = Vocabulary.build(sentences)
    logger.info(f"Vocabulary has {vocab.size} tokens ({vocab.size - vocab.n_reserved} words)")
    return sentences, vocab


def write_sentences(path: Path, sentences: SentenceSet) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in sentences.lines()), encoding="utf-8")


def split_corpus(
    sentences: SentenceSet, valid_fraction: float, test_fraction: float, rng: np.random.Generator
) -> Tuple[SentenceSet, SentenceSet, SentenceSet]:
    """
    Shuffle and split into train/valid/test.

    Args:
        sentences: Full corpus
        valid_fraction: Share of sentences for validation
        test_fraction: Share of sentences for test
        rng: Random stream

    Returns:
        ``(train, valid, test)``
    """
    if valid_fraction < 0 or test_fraction < 0 or valid_fraction + test_fraction >= 1:
        raise DegenerateInputError("split fractions must be non-negative and sum below 1")
    order = rng.permutation(len(sentences))
    n_valid = int(round(valid_fraction * len(sentences)))
    n_test = int(round(test_fraction * len(sentences)))
    valid = sentences.subset(order[:n_valid]).with_provenance(Provenance.VALID)
    test = sentences.subset(order[n_valid:n_valid + n_test]).with_provenance(Provenance.TEST)
    train = sentences.subset(order[n_valid + n_test:]).with_provenance(Provenance.TRAIN)
    if len(train) == 0:
        raise DataError("training split is empty")
    return train, valid, test


def encode_batch(
    sentences: Sequence[Sequence[str]], vocab: Vocabulary, max_len: int, append_eos: bool = True
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Encode sentences into a padded ``(B, max_len)`` id matrix.

    Sentences are truncated so that the appended ``[EOS]`` always fits.

    Returns:
        Id matrix and the per-row count of non-pad positions
    """
    if max_len < 1:
        raise DegenerateInputError("max_len must be >= 1")
    ids = np.full((len(sentences), max_len), vocab.pad_id, dtype=np.int64)
    lengths = np.zeros(len(sentences), dtype=np.int64)
    room = max_len - 1 if append_eos else max_len
    for row, sentence in enumerate(sentences):
        encoded = vocab.encode(sentence)[:room]
        if append_eos:
            encoded.append(vocab.eos_id)
        ids[row, : len(encoded)] = encoded
        lengths[row] = len(encoded)
    return ids, lengths


def decode_batch(ids: np.ndarray, vocab: Vocabulary, provenance: Provenance = Provenance.GENERATED) -> SentenceSet:
    """Decode an id matrix; rows that decode to nothing become a single ``[UNK]``."""
    sentences = [vocab.decode(row) or [UNK] for row in ids]
    return SentenceSet(sentences=sentences, provenance=provenance)


def sample_subset(sentences: SentenceSet, size: Optional[int], rng: np.random.Generator) -> SentenceSet:
    """Random subset of at most ``size`` sentences (all when ``size`` is None)."""
    if size is None or size >= len(sentences):
        return sentences
    return sentences.subset(np.sort(rng.choice(len(sentences), size=size, replace=False)))
