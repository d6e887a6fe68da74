"""
Evaluation Metrics.

Token-level scores (BLEU, Self-BLEU, Inverse BLEU) on the 0-100 scale,
embedding-level scores (Frechet embedding distance, coverage rates, least
coverage rate) over a pluggable sentence embedder, and the corruption
machinery used to probe metric sensitivity.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from nltk.translate.bleu_score import SmoothingFunction, corpus_bleu, sentence_bleu
from scipy.linalg import eigh

from ..models.corpus import SentenceSet
from ..models.grammar import GrammarSpec
from ..models.training import CoverageMode, Provenance
from ..utils.validation import DegenerateInputError, check_probability
from .corpus import Vocabulary, sample_subset
from .embedders import Embedder
from .grammar import acceptance_rate

logger = logging.getLogger(__name__)

DEFAULT_MAX_N = 5
EIGEN_RELATIVE_FLOOR = 1e-10
FED_NEGATIVE_TOLERANCE = 1e-8

_SMOOTHING = SmoothingFunction().method2


def _weights(max_n: int) -> Tuple[float, ...]:
    if max_n < 1:
        raise DegenerateInputError(f"max_n must be >= 1, got {max_n}")
    return (1.0 / max_n,) * max_n


def _require_tokens(sentences: SentenceSet, role: str) -> None:
    if len(sentences) == 0:
        raise DegenerateInputError(f"{role} set is empty")


def bleu(hypotheses: SentenceSet, references: SentenceSet, max_n: int = DEFAULT_MAX_N) -> float:
    """
    Corpus BLEU of every hypothesis against the whole reference set.

    Modified n-gram precisions up to ``max_n`` with uniform weights, add-one
    smoothing for orders two and up, and the corpus brevity penalty. An order
    the hypotheses are too short to contain still counts as precision 1/2, so
    an identical hypothesis shorter than ``max_n`` tokens scores below 100.

    Returns:
        Score in [0, 100]
    """
    _require_tokens(hypotheses, "hypothesis")
    _require_tokens(references, "reference")
    refs = list(references.sentences)
    score = corpus_bleu(
        [refs] * len(hypotheses),
        list(hypotheses.sentences),
        weights=_weights(max_n),
        smoothing_function=_SMOOTHING,
    )
    return 100.0 * float(score)


def self_bleu(sentences: SentenceSet, max_n: int = DEFAULT_MAX_N) -> float:
    """Mean BLEU of each sentence against all the others."""
    if len(sentences) < 2:
        raise DegenerateInputError("self-BLEU needs at least two sentences")
    weights = _weights(max_n)
    items = list(sentences.sentences)
    scores = []
    for index, hypothesis in enumerate(items):
        others = items[:index] + items[index + 1:]
        scores.append(sentence_bleu(others, hypothesis, weights=weights, smoothing_function=_SMOOTHING))
    return 100.0 * float(np.mean(scores))


def inverse_bleu(test: SentenceSet, generated: SentenceSet, max_n: int = DEFAULT_MAX_N) -> float:
    """BLEU with test sentences as hypotheses and generated sentences as references."""
    return bleu(test, generated, max_n)


@dataclass
class GaussianSummary:
    """Sample mean and unbiased covariance of an embedding set."""

    mean: np.ndarray
    cov: np.ndarray


def gaussian_summary(embeddings: np.ndarray) -> GaussianSummary:
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise DegenerateInputError("a Gaussian summary needs at least two embeddings")
    mean = embeddings.mean(axis=0)
    cov = np.atleast_2d(np.cov(embeddings, rowvar=False, ddof=1))
    return GaussianSummary(mean=mean, cov=cov)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = eigh((matrix + matrix.T) / 2.0)
    floor = EIGEN_RELATIVE_FLOOR * max(float(values.max(initial=0.0)), 0.0)
    values = np.where(values > floor, values, 0.0)
    return (vectors * np.sqrt(values)) @ vectors.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """
    ``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the square root is taken from the eigenvalues of the
    symmetric product ``S_a^(1/2) S_b S_a^(1/2)``, with eigenvalues below
    ``1e-10`` of the largest treated as zero.
    """
    if a.mean.shape != b.mean.shape:
        raise DegenerateInputError("summaries have different dimensions")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    product = root_a @ b.cov @ root_a
    values = eigh((product + product.T) / 2.0, eigvals_only=True)
    floor = EIGEN_RELATIVE_FLOOR * max(float(values.max(initial=0.0)), 0.0)
    trace_root = float(np.sum(np.sqrt(np.where(values > floor, values, 0.0))))
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_root)
    if value < 0.0:
        if value < -FED_NEGATIVE_TOLERANCE:
            logger.warning(f"Frechet distance {value:.3e} below zero; clamping")
        value = 0.0
    return value


def fed(a: SentenceSet, b: SentenceSet, embedder: Embedder) -> float:
    """Frechet embedding distance between two sentence sets."""
    return frechet_distance(gaussian_summary(embedder.embed(a.sentences)), gaussian_summary(embedder.embed(b.sentences)))


def coverage_from_similarity(
    similarity: np.ndarray, tau: float, mode: CoverageMode = CoverageMode.MAX
) -> Tuple[float, float]:
    """
    Coverage rates from a precomputed ``(N_a, N_b)`` similarity matrix.

    Under ``max`` a row is covered when its largest similarity reaches
    ``tau``; under ``sum`` when the row sum does.
    """
    reduce = np.max if mode == CoverageMode.MAX else np.sum
    rate_a = float(np.mean(reduce(similarity, axis=1) >= tau))
    rate_b = float(np.mean(reduce(similarity, axis=0) >= tau))
    return rate_a, rate_b


def coverage_from_embeddings(
    emb_a: np.ndarray,
    emb_b: np.ndarray,
    tau: float,
    mode: CoverageMode = CoverageMode.MAX,
    block: int = 1024,
) -> Tuple[float, float]:
    """Coverage rates of unit-norm embeddings, computed block by block."""
    if emb_a.shape[0] == 0 or emb_b.shape[0] == 0:
        raise DegenerateInputError("coverage needs non-empty sets")
    if not 0.0 < tau < 1.0:
        raise DegenerateInputError(f"tau must lie in (0, 1), got {tau}")
    best_a = np.full(emb_a.shape[0], -np.inf) if mode == CoverageMode.MAX else np.zeros(emb_a.shape[0])
    best_b = np.full(emb_b.shape[0], -np.inf) if mode == CoverageMode.MAX else np.zeros(emb_b.shape[0])
    for i in range(0, emb_a.shape[0], block):
        for j in range(0, emb_b.shape[0], block):
            sim = emb_a[i:i + block] @ emb_b[j:j + block].T
            if mode == CoverageMode.MAX:
                best_a[i:i + block] = np.maximum(best_a[i:i + block], sim.max(axis=1))
                best_b[j:j + block] = np.maximum(best_b[j:j + block], sim.max(axis=0))
            else:
                best_a[i:i + block] += sim.sum(axis=1)
                best_b[j:j + block] += sim.sum(axis=0)
    return float(np.mean(best_a >= tau)), float(np.mean(best_b >= tau))


def coverage_rates(
    a: SentenceSet, b: SentenceSet, embedder: Embedder, tau: float, mode: CoverageMode = CoverageMode.MAX
) -> Tuple[float, float]:
    """Fractions of ``a`` covered by ``b`` and of ``b`` covered by ``a``."""
    _require_tokens(a, "first")
    _require_tokens(b, "second")
    return coverage_from_embeddings(embedder.embed(a.sentences), embedder.embed(b.sentences), tau, mode)


def lcr(a: SentenceSet, b: SentenceSet, embedder: Embedder, tau: float, mode: CoverageMode = CoverageMode.MAX) -> float:
    """Least coverage rate: the smaller of the two coverage rates."""
    return min(coverage_rates(a, b, embedder, tau, mode))


def corrupt_corpus(sentences: SentenceSet, p: float, vocab: Vocabulary, rng: np.random.Generator) -> SentenceSet:
    """
    Replace each token, independently with probability ``p``, by a uniform random word.

    Replacement words are drawn from the non-reserved vocabulary and may
    coincide with the original token.
    """
    check_probability(p, "p", allow_one=True)
    words = vocab.tokens[vocab.n_reserved:]
    if not words:
        raise DegenerateInputError("vocabulary has no words to draw replacements from")
    corrupted = []
    for sentence in sentences:
        hit = rng.random(len(sentence)) < p
        picks = rng.integers(len(words), size=len(sentence))
        corrupted.append([words[k] if h else token for token, h, k in zip(sentence, hit, picks)])
    return SentenceSet(sentences=corrupted, provenance=sentences.provenance)


def length_distribution(sentences: SentenceSet) -> Dict[int, float]:
    """Fraction of sentences at each length, ordered by length."""
    _require_tokens(sentences, "sentence")
    counts = Counter(len(sentence) for sentence in sentences)
    return {length: counts[length] / len(sentences) for length in sorted(counts)}


def mean_length(sentences: SentenceSet) -> float:
    return sentences.token_count / max(len(sentences), 1)


@dataclass
class EvaluationSets:
    """Sentence sets and knobs for a full metric evaluation."""

    train: SentenceSet
    test: SentenceSet
    generated: SentenceSet
    embedder: Embedder
    tau: float
    mode: CoverageMode = CoverageMode.MAX
    max_n: int = DEFAULT_MAX_N
    token_size: Optional[int] = None
    grammar: Optional[GrammarSpec] = None


def evaluate_sets(sets: EvaluationSets, rng: np.random.Generator) -> Dict[str, float]:
    """
    Every metric on one generated set.

    Token metrics use at most ``token_size`` sentences of each set.

    Returns:
        Flat metric mapping
    """
    generated = sets.generated.with_provenance(Provenance.GENERATED)
    token_generated = sample_subset(generated, sets.token_size, rng)
    token_test = sample_subset(sets.test, sets.token_size, rng)
    rate_test, rate_generated = coverage_rates(sets.test, generated, sets.embedder, sets.tau, sets.mode)
    results = {
        "bleu": bleu(token_generated, token_test, sets.max_n),
        "self_bleu": self_bleu(token_generated, sets.max_n),
        "inverse_bleu": inverse_bleu(token_test, token_generated, sets.max_n),
        "fed": fed(sets.test, generated, sets.embedder),
        "coverage_test": rate_test,
        "coverage_generated": rate_generated,
        "lcr": min(rate_test, rate_generated),
        "mean_length": mean_length(generated),
        "distinct_sentences": len({tuple(s) for s in generated}) / len(generated),
    }
    if sets.grammar is not None:
        results["grammar_acceptance"] = acceptance_rate(sets.grammar, generated)
    return results


def coverage_monotone(rates: Sequence[float]) -> bool:
    """Whether a series never increases."""
    return all(b <= a for a, b in zip(rates, rates[1:]))
