"""
Training Models.

This module defines the enumerations shared across the package, the typed
training configurations derived from a run configuration, and the trace
records emitted by the training loops.
"""

from enum import Enum
from typing import TYPE_CHECKING, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

if TYPE_CHECKING:
    from ..config.settings import RunConfig


class LstmVariant(str, Enum):
    """Recurrent cell architectures."""
    VANILLA = "vanilla"
    LAYER_NORM = "layer_norm"
    FULLY_NORMALIZED = "fully_normalized"


class AlignerObjective(str, Enum):
    """Aligner training objectives."""
    VARIANCE_PENALIZED = "variance_penalized"
    CROSS_ENTROPY = "cross_entropy"


class PenaltyReduction(str, Enum):
    """How the variance penalty is reduced over representation dimensions."""
    SUM = "sum"
    MEAN = "mean"


class CoverageMode(str, Enum):
    """Coverage decision rule over a similarity row."""
    MAX = "max"
    SUM = "sum"


class Provenance(str, Enum):
    """Origin of a sentence set."""
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"
    GENERATED = "generated"


class AlignerTrainConfig(BaseModel):
    """Hyperparameters of aligner training."""

    model_config = ConfigDict(frozen=True)

    epochs: int = Field(200, ge=0, description="Maximum training epochs")
    batch_size: int = Field(128, ge=1, description="Sentences per batch")
    lr: float = Field(1e-4, gt=0, description="Learning rate")
    betas: Tuple[float, float] = Field((0.9, 0.999), description="Moment decay rates")
    weight_decay: float = Field(1e-5, ge=0, description="Decoupled weight decay")
    lambda_a: float = Field(0.1, ge=0, description="Variance penalty weight")
    objective: AlignerObjective = Field(AlignerObjective.VARIANCE_PENALIZED, description="Training objective")
    penalty_reduction: PenaltyReduction = Field(PenaltyReduction.MEAN, description="Penalty reduction over dims")
    mask_prob: float = Field(0.15, ge=0, lt=1, description="Selection probability for masking")
    target_accuracy: Optional[float] = Field(None, gt=0, le=1, description="Stop once masked accuracy reaches this")

    @classmethod
    def from_run_config(cls, config: "RunConfig") -> "AlignerTrainConfig":
        """Build from a resolved run configuration."""
        return cls(
            epochs=config.aligner_epochs,
            batch_size=config.batch_size,
            lr=config.aligner_lr,
            betas=config.aligner_betas,
            weight_decay=config.aligner_weight_decay,
            lambda_a=config.lambda_a,
            objective=config.aligner_objective,
            penalty_reduction=config.penalty_reduction,
            mask_prob=config.mask_prob,
            target_accuracy=config.aligner_target_accuracy,
        )


class GanTrainConfig(BaseModel):
    """Hyperparameters of adversarial training."""

    model_config = ConfigDict(frozen=True)

    bs_d: int = Field(128, ge=1, description="Discriminator batch size")
    rho: float = Field(0.75, ge=0, lt=1, description="Dropout-sampling rate")
    lambda_d: float = Field(50.0, ge=0, description="Lipschitz penalty weight")
    max_len: int = Field(20, ge=1, description="Generated sequence length")
    epochs: int = Field(3000, ge=0, description="Passes of bs_d batches over the training set")
    max_steps: Optional[int] = Field(None, ge=0, description="Hard cap on outer steps")
    disc_lr: float = Field(4e-4, gt=0, description="Discriminator learning rate")
    disc_betas: Tuple[float, float] = Field((0.5, 0.9), description="Discriminator moment decay rates")
    disc_weight_decay: float = Field(1e-4, ge=0, description="Discriminator decoupled weight decay")
    gen_lr: float = Field(1e-4, gt=0, description="Generator learning rate")
    gen_betas: Tuple[float, float] = Field((0.5, 0.9), description="Generator moment decay rates")
    d_steps_per_g: int = Field(1, ge=1, description="Discriminator updates per generator update")
    clip_grad_norm: Optional[float] = Field(None, gt=0, description="Optional global-norm clipping")
    collapse_window: int = Field(50, ge=1, description="Window for the mode-collapse alarm")
    collapse_threshold: float = Field(0.1, ge=0, le=1, description="Distinct-ratio alarm threshold")
    eval_every: Optional[int] = Field(None, ge=1, description="Steps between model-selection evaluations")

    @field_validator("rho")
    @classmethod
    def validate_rho(cls, v):
        """Reject rates that would zero every sub-model."""
        if v >= 1.0:
            raise ValueError("rho must be < 1")
        return v

    @property
    def bs_g(self) -> int:
        """Generator batch size under imbalanced batching."""
        from ..core.gan import imbalanced_batch_size

        return imbalanced_batch_size(self.bs_d, self.rho)

    @classmethod
    def from_run_config(cls, config: "RunConfig") -> "GanTrainConfig":
        """Build from a resolved run configuration."""
        return cls(
            bs_d=config.batch_size,
            rho=config.sampling_dropout,
            lambda_d=config.lambda_d,
            max_len=config.max_len,
            epochs=config.gan_epochs,
            max_steps=config.gan_max_steps,
            disc_lr=config.disc_lr,
            disc_betas=config.disc_betas,
            disc_weight_decay=config.disc_weight_decay,
            gen_lr=config.gen_lr,
            gen_betas=config.gen_betas,
            d_steps_per_g=config.d_steps_per_g,
            clip_grad_norm=config.clip_grad_norm,
            collapse_window=config.collapse_window,
            collapse_threshold=config.collapse_threshold,
            eval_every=config.eval_every,
        )


class MleTrainConfig(BaseModel):
    """Hyperparameters of the teacher-forced comparison model."""

    model_config = ConfigDict(frozen=True)

    epochs: int = Field(50, ge=0, description="Training epochs")
    batch_size: int = Field(128, ge=1, description="Sentences per batch")
    lr: float = Field(1e-3, gt=0, description="Learning rate")
    betas: Tuple[float, float] = Field((0.9, 0.999), description="Moment decay rates")
    clip_grad_norm: Optional[float] = Field(None, gt=0, description="Optional global-norm clipping")

    @classmethod
    def from_run_config(cls, config: "RunConfig") -> "MleTrainConfig":
        """Build from a resolved run configuration."""
        return cls(
            epochs=config.mle_epochs,
            batch_size=config.batch_size,
            lr=config.mle_lr,
            betas=config.aligner_betas,
            clip_grad_norm=config.clip_grad_norm,
        )


class TraceRecord(BaseModel):
    """One line of a training trace."""

    phase: str = Field(..., description="Training phase (aligner, gan, mle)")
    step: int = Field(..., description="Step or epoch index")
    loss: Optional[float] = Field(None, description="Aligner or MLE loss")
    accuracy: Optional[float] = Field(None, description="Masked reconstruction accuracy")
    loss_d: Optional[float] = Field(None, description="Discriminator loss")
    loss_g: Optional[float] = Field(None, description="Generator loss")
    penalty: Optional[float] = Field(None, description="Lipschitz penalty R")
    wasserstein: Optional[float] = Field(None, description="mean D(r_d) - mean D(r_g)")
    grad_norm_d: Optional[float] = Field(None, description="Discriminator gradient norm")
    grad_norm_g: Optional[float] = Field(None, description="Generator gradient norm")
    distinct_ratio: Optional[float] = Field(None, description="Distinct generated sequences / batch")
    eval_fed: Optional[float] = Field(None, description="Validation FED at model-selection points")
