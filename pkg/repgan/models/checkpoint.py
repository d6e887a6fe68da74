"""
Checkpoint Models.

This module defines the JSON header stored in front of every checkpoint's
parameter blob.
"""

from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

CHECKPOINT_FORMAT_VERSION = 1


class ModelKind(str, Enum):
    """What a checkpoint holds."""
    ALIGNER = "aligner"
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"
    MLE = "mle"


class ParameterEntry(BaseModel):
    """One named array in the blob, in storage order."""

    name: str = Field(..., description="Parameter name")
    shape: List[int] = Field(..., description="Array shape")


class CheckpointHeader(BaseModel):
    """Everything needed to rebuild a model around its parameter blob."""

    version: int = Field(CHECKPOINT_FORMAT_VERSION, description="Checkpoint format version")
    kind: ModelKind = Field(..., description="Model kind")
    variant: Optional[str] = Field(None, description="Recurrent variant, if any")
    architecture: Dict[str, Any] = Field(default_factory=dict, description="Constructor arguments")
    entries: List[ParameterEntry] = Field(default_factory=list, description="Parameter layout")
    rng_state: Optional[Dict[str, Any]] = Field(None, description="Random stream state at save time")
    metadata: Dict[str, Any] = Field(default_factory=dict, description="Run metadata (vocabulary, seeds, step)")
    checksum: str = Field("", description="SHA-256 of the parameter blob")

    @property
    def total_size(self) -> int:
        size = 0
        for entry in self.entries:
            count = 1
            for dim in entry.shape:
                count *= dim
            size += count
        return size
