"""
Sentence Embedders.

Sentence sets are mapped to unit-norm vectors through a small interface
with two implementations: a deterministic hashed character 3-gram
embedder, and a file-backed lookup of precomputed embeddings.
"""

import logging
from pathlib import Path
from typing import Dict, Protocol, Sequence

import numpy as np
from sklearn.feature_extraction.text import HashingVectorizer
from sklearn.preprocessing import normalize

from ..utils.validation import DataError
from .corpus import read_lines

logger = logging.getLogger(__name__)

DEFAULT_HASH_DIM = 256


class Embedder(Protocol):
    """Maps tokenized sentences to L2-normalized ``(N, D)`` vectors."""

    @property
    def dim(self) -> int: ...

    def embed(self, sentences: Sequence[Sequence[str]]) -> np.ndarray: ...


class HashedNgramEmbedder:
    """Character 3-grams hashed into ``dim`` buckets, log-scaled counts, L2 norm."""

    def __init__(self, dim: int = DEFAULT_HASH_DIM):
        if dim < 1:
            raise DataError(f"embedding dimension must be positive, got {dim}")
        self._dim = dim
        self._vectorizer = HashingVectorizer(
            analyzer="char",
            ngram_range=(3, 3),
            n_features=dim,
            alternate_sign=False,
            norm=None,
            lowercase=False,
        )

    @property
    def dim(self) -> int:
        return self._dim

    def embed(self, sentences: Sequence[Sequence[str]]) -> np.ndarray:
        texts = [f" {' '.join(sentence)} " for sentence in sentences]
        counts = self._vectorizer.transform(texts).toarray()
        return normalize(np.log1p(counts), norm="l2")


class FileEmbedder:
    """
    Precomputed embeddings keyed by sentence text.

    The embedding file starts with a line ``N D`` followed by ``N`` lines of
    ``D`` floats, one-to-one with the ``N`` lines of the sentence file.
    """

    def __init__(self, sentence_path: Path, embedding_path: Path):
        sentences = read_lines(sentence_path)
        lines = read_lines(embedding_path)
        if not lines:
            raise DataError(f"embedding file {embedding_path} is empty")
        try:
            count, dim = (int(v) for v in lines[0].split())
        except ValueError as e:
            raise DataError(f"bad embedding header in {embedding_path}: {lines[0]!r}") from e
        if count != len(sentences) or len(lines) - 1 != count:
            raise DataError(
                f"{embedding_path} declares {count} vectors with {len(lines) - 1} rows "
                f"for {len(sentences)} sentences"
            )
        try:
            matrix = np.array([[float(v) for v in line.split()] for line in lines[1:]], dtype=np.float64)
        except ValueError as e:
            raise DataError(f"non-numeric entry in {embedding_path}") from e
        if count and matrix.shape != (count, dim):
            raise DataError(f"embedding rows in {embedding_path} do not all have {dim} values")
        matrix = normalize(matrix.reshape(count, dim), norm="l2")
        self._dim = dim
        self._index: Dict[str, np.ndarray] = {
            " ".join(sentence.split()): row for sentence, row in zip(sentences, matrix)
        }
        logger.info(f"Loaded {count} precomputed embeddings of dimension {dim}")

    @property
    def dim(self) -> int:
        return self._dim

    def embed(self, sentences: Sequence[Sequence[str]]) -> np.ndarray:
        rows = []
        for sentence in sentences:
            key = " ".join(sentence)
            if key not in self._index:
                raise DataError(f"no precomputed embedding for sentence {key!r}")
            rows.append(self._index[key])
        return np.array(rows, dtype=np.float64).reshape(len(rows), self._dim)
