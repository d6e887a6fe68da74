"""
Corpus Models.

This module defines the tokenized sentence collections passed between the
corpus pipeline, the generators and the metrics.
"""

from typing import Iterator, List

from pydantic import BaseModel, Field, field_validator

from .training import Provenance


class SentenceSet(BaseModel):
    """Tokenized sentences with their origin."""

    sentences: List[List[str]] = Field(default_factory=list, description="Whitespace-tokenized sentences")
    provenance: Provenance = Field(Provenance.TRAIN, description="Where the sentences came from")

    @field_validator("sentences")
    @classmethod
    def validate_sentences(cls, v):
        """Every sentence must hold at least one token."""
        for index, sentence in enumerate(v):
            if not sentence:
                raise ValueError(f"sentence {index} is empty")
        return v

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self) -> Iterator[List[str]]:  # type: ignore[override]
        return iter(self.sentences)

    def __getitem__(self, index: int) -> List[str]:
        return self.sentences[index]

    def lines(self) -> List[str]:
        """Detokenized sentences."""
        return [" ".join(sentence) for sentence in self.sentences]

    def subset(self, indices) -> "SentenceSet":
        """Sentences at ``indices``, same provenance."""
        return SentenceSet(sentences=[self.sentences[int(i)] for i in indices], provenance=self.provenance)

    def with_provenance(self, provenance: Provenance) -> "SentenceSet":
        return SentenceSet(sentences=self.sentences, provenance=provenance)

    @property
    def token_count(self) -> int:
        return sum(len(sentence) for sentence in self.sentences)
