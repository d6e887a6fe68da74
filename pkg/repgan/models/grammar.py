"""
Grammar Models.

This module defines the template grammar used to synthesize desk-scale
corpora with a decidable membership test.
"""

from typing import Dict, List

from pydantic import BaseModel, Field, field_validator, model_validator

MAX_GRAMMAR_VOCABULARY = 200


class Template(BaseModel):
    """A sentence pattern; ``<NAME>`` entries are slots, anything else is literal."""

    pattern: List[str] = Field(..., min_length=1, description="Tokens and slot references")
    weight: float = Field(..., gt=0, description="Relative sampling weight")

    def slots(self) -> List[str]:
        return [token[1:-1] for token in self.pattern if is_slot(token)]


def is_slot(token: str) -> bool:
    return len(token) > 2 and token.startswith("<") and token.endswith(">")


class GrammarSpec(BaseModel):
    """Weighted templates over named slot-filler lists."""

    templates: List[Template] = Field(..., min_length=1, description="Sentence templates")
    slots: Dict[str, List[str]] = Field(..., description="Filler words per slot name")
    min_len: int = Field(1, ge=1, description="Shortest template length")
    max_len: int = Field(11, ge=1, description="Longest template length")

    @field_validator("slots")
    @classmethod
    def validate_slots(cls, v):
        """Slots need at least one filler and fillers must be plain words."""
        for name, fillers in v.items():
            if not fillers:
                raise ValueError(f"slot '{name}' has no fillers")
            for word in fillers:
                if not word or any(ch.isspace() for ch in word) or is_slot(word):
                    raise ValueError(f"invalid filler '{word}' in slot '{name}'")
        return v

    @model_validator(mode="after")
    def validate_grammar(self):
        """Templates must reference defined slots and respect the length bounds."""
        if self.min_len > self.max_len:
            raise ValueError("min_len exceeds max_len")
        for template in self.templates:
            missing = [name for name in template.slots() if name not in self.slots]
            if missing:
                raise ValueError(f"template {' '.join(template.pattern)} references undefined slots {missing}")
            if not self.min_len <= len(template.pattern) <= self.max_len:
                raise ValueError(f"template {' '.join(template.pattern)} violates the length bounds")
        if len(self.vocabulary()) > MAX_GRAMMAR_VOCABULARY:
            raise ValueError(f"grammar vocabulary exceeds {MAX_GRAMMAR_VOCABULARY} words")
        return self

    def vocabulary(self) -> List[str]:
        """Every word the grammar can produce, sorted."""
        words = {word for fillers in self.slots.values() for word in fillers}
        for template in self.templates:
            words.update(token for token in template.pattern if not is_slot(token))
        return sorted(words)
