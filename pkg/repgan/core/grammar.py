"""
Synthetic Grammar Corpus.

Samples sentences from a weighted template grammar and decides membership
of arbitrary token sequences, which serves as a fluency oracle for
generated text.
"""

import logging
from typing import List, Sequence, Tuple

import numpy as np

from ..models.corpus import SentenceSet
from ..models.grammar import GrammarSpec, Template, is_slot
from ..models.training import Provenance
from ..utils.validation import DegenerateInputError

logger = logging.getLogger(__name__)

_DEFAULT_SLOTS = {
    "DET": ["the", "a", "every", "some", "this", "that", "one", "no"],
    "ADJ": [
        "red", "blue", "green", "small", "large", "old", "young", "quiet", "loud", "bright",
        "dark", "happy", "sad", "quick", "slow", "warm", "cold", "tall", "short", "clever",
        "gentle", "brave", "tired", "hungry", "busy", "calm", "strange", "famous", "lonely", "proud",
    ],
    "NOUN": [
        "dog", "cat", "bird", "horse", "child", "teacher", "farmer", "doctor", "artist", "sailor",
        "king", "queen", "student", "baker", "pilot", "fox", "rabbit", "bear", "wolf", "lion",
        "river", "mountain", "city", "garden", "forest", "house", "boat", "train", "bridge", "tower",
        "book", "letter", "song", "picture", "table", "window", "door", "road", "field", "lamp",
    ],
    "VERB_T": [
        "saw", "found", "liked", "followed", "painted", "carried", "watched", "helped", "visited", "built",
        "chased", "opened", "closed", "wrote", "read", "heard", "took", "moved", "cleaned", "fixed",
        "pushed", "pulled", "called", "met", "left",
    ],
    "VERB_I": [
        "slept", "ran", "laughed", "waited", "smiled", "fell", "sang", "danced", "cried", "jumped",
        "walked", "rested", "shouted", "stayed", "vanished",
    ],
    "PREP": ["on", "in", "near", "under", "behind", "beside", "with", "across"],
    "ADV": [
        "quickly", "slowly", "quietly", "happily", "suddenly", "softly", "loudly", "calmly",
        "early", "late", "again", "today",
    ],
}

_DEFAULT_TEMPLATES = [
    (["<DET>", "<NOUN>", "<VERB_I>"], 0.15),
    (["<DET>", "<ADJ>", "<NOUN>", "<VERB_I>", "<ADV>"], 0.15),
    (["<DET>", "<NOUN>", "<VERB_T>", "<DET>", "<NOUN>"], 0.2),
    (["<DET>", "<ADJ>", "<NOUN>", "<VERB_T>", "<DET>", "<ADJ>", "<NOUN>"], 0.15),
    (["<DET>", "<NOUN>", "<VERB_I>", "<PREP>", "<DET>", "<NOUN>"], 0.15),
    (["<DET>", "<NOUN>", "was", "very", "<ADJ>"], 0.1),
    (["<DET>", "<ADJ>", "<NOUN>", "<VERB_T>", "<DET>", "<NOUN>", "<PREP>", "<DET>", "<NOUN>"], 0.05),
    (["<DET>", "<NOUN>", "and", "<DET>", "<NOUN>", "<VERB_I>", "<ADV>"], 0.05),
]


def default_grammar() -> GrammarSpec:
    """The built-in desk-scale grammar (under 200 words, sentences of 3 to 9 tokens)."""
    return GrammarSpec(
        templates=[Template(pattern=pattern, weight=weight) for pattern, weight in _DEFAULT_TEMPLATES],
        slots=_DEFAULT_SLOTS,
        min_len=3,
        max_len=9,
    )


def template_probabilities(spec: GrammarSpec) -> np.ndarray:
    weights = np.array([template.weight for template in spec.templates], dtype=np.float64)
    return weights / weights.sum()


def sample_sentence(spec: GrammarSpec, rng: np.random.Generator) -> Tuple[int, List[str]]:
    """One sentence and the index of the template it came from."""
    index = int(rng.choice(len(spec.templates), p=template_probabilities(spec)))
    return index, _fill(spec.templates[index], spec, rng)


def _fill(template: Template, spec: GrammarSpec, rng: np.random.Generator) -> List[str]:
    words = []
    for token in template.pattern:
        if is_slot(token):
            fillers = spec.slots[token[1:-1]]
            words.append(fillers[int(rng.integers(len(fillers)))])
        else:
            words.append(token)
    return words


def gen_synthetic_corpus_with_templates(
    spec: GrammarSpec, n: int, rng: np.random.Generator
) -> Tuple[SentenceSet, np.ndarray]:
    """
    Sample ``n`` i.i.d. sentences.

    Returns:
        The sentences and the template index of each
    """
    if n < 1:
        raise DegenerateInputError(f"n must be >= 1, got {n}")
    indices = rng.choice(len(spec.templates), size=n, p=template_probabilities(spec))
    sentences = [_fill(spec.templates[int(i)], spec, rng) for i in indices]
    logger.debug(f"Sampled {n} grammar sentences")
    return SentenceSet(sentences=sentences, provenance=Provenance.TRAIN), indices


def gen_synthetic_corpus(spec: GrammarSpec, n: int, rng: np.random.Generator) -> SentenceSet:
    """Sample ``n`` i.i.d. sentences from the grammar."""
    return gen_synthetic_corpus_with_templates(spec, n, rng)[0]


def _matches(template: Template, spec: GrammarSpec, tokens: Sequence[str]) -> bool:
    if len(template.pattern) != len(tokens):
        return False
    for expected, token in zip(template.pattern, tokens):
        if is_slot(expected):
            if token not in spec.slots[expected[1:-1]]:
                return False
        elif token != expected:
            return False
    return True


def accepts(spec: GrammarSpec, tokens: Sequence[str]) -> bool:
    """Whether some template derives ``tokens``."""
    return any(_matches(template, spec, tokens) for template in spec.templates)


def acceptance_rate(spec: GrammarSpec, sentences: SentenceSet) -> float:
    """Fraction of sentences the grammar accepts."""
    if len(sentences) == 0:
        raise DegenerateInputError("acceptance rate of an empty set")
    return sum(accepts(spec, sentence) for sentence in sentences) / len(sentences)
