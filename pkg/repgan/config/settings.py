"""
Configuration settings for RepGAN Lab using Pydantic Settings.

This module handles environment variable loading for the command line
(output root, logging) and the validated run configuration that carries
every model, training, evaluation and experiment hyperparameter.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from ..models.training import AlignerObjective, CoverageMode, LstmVariant, PenaltyReduction
from ..utils.validation import ConfigError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process-level settings read from ``REPGAN_*`` environment variables."""

    output_root: str = Field("runs", description="Default directory for run outputs")
    log_level: str = Field("INFO", description="Logging level")
    log_file: Optional[str] = Field(None, description="Optional rotating log file")

    model_config = SettingsConfigDict(
        env_prefix="REPGAN_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        """Validate log level."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"Log level must be one of: {valid_levels}")
        return v.upper()


def get_settings() -> Settings:
    """Settings from the current environment."""
    return Settings()


def _split(v: Any) -> Any:
    if isinstance(v, str):
        return [item.strip() for item in v.split(",") if item.strip()]
    return v


class RunConfig(BaseModel):
    """All hyperparameters of a run; defaults are the full-scale values."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(0, ge=0, description="Master seed")

    # Data
    corpus_path: Optional[str] = Field(None, description="Corpus file; the built-in grammar is used when unset")
    grammar_size: int = Field(10000, ge=1, description="Sentences sampled from the grammar")
    valid_fraction: float = Field(0.05, ge=0, lt=1, description="Validation share of the corpus")
    test_fraction: float = Field(0.1, ge=0, lt=1, description="Test share of the corpus")
    max_len: int = Field(32, ge=2, description="Sequence length including [EOS]")

    # Architecture
    embed_dim: int = Field(512, ge=1, description="Embedding size (aligner width and generator input)")
    rep_dim: int = Field(512, ge=1, description="Representation size E_r")
    noise_dim: int = Field(128, ge=0, description="Dimension of random noise")
    gen_hidden: int = Field(512, ge=1, description="Feature size of the generator")
    disc_hidden: int = Field(1024, ge=1, description="Feature size of the discriminator")
    gen_layers: int = Field(2, ge=1, description="Generator layers")
    disc_layers: int = Field(2, ge=1, description="Discriminator layers")
    gen_variant: LstmVariant = Field(LstmVariant.FULLY_NORMALIZED, description="Generator cell variant")
    disc_variant: LstmVariant = Field(LstmVariant.FULLY_NORMALIZED, description="Discriminator cell variant")
    aligner_layers: int = Field(4, ge=1, description="Aligner encoder layers")
    aligner_heads: int = Field(8, ge=1, description="Aligner attention heads")
    aligner_ff_dim: int = Field(2048, ge=1, description="Aligner feed-forward width")
    aligner_dropout: float = Field(0.5, ge=0, lt=1, description="Aligner dropout rate")

    # Training
    batch_size: int = Field(128, ge=1, description="Batch size (bs_d)")
    sampling_dropout: float = Field(0.75, ge=0, lt=1, description="Dropout rate of dropout sampling")
    noise_std: float = Field(1.0, ge=0, description="Scale of the generator noise")
    lambda_a: float = Field(0.1, ge=0, description="Variance penalty weight in the aligner loss")
    lambda_d: float = Field(50.0, ge=0, description="Lipschitz penalty weight in the discriminator loss")
    aligner_epochs: int = Field(200, ge=0, description="Maximum aligner epochs")
    aligner_lr: float = Field(1e-4, gt=0, description="Aligner learning rate")
    aligner_betas: Tuple[float, float] = Field((0.9, 0.999), description="Aligner moment decay rates")
    aligner_weight_decay: float = Field(1e-5, ge=0, description="Aligner decoupled weight decay")
    aligner_objective: AlignerObjective = Field(AlignerObjective.VARIANCE_PENALIZED, description="Aligner objective")
    penalty_reduction: PenaltyReduction = Field(PenaltyReduction.MEAN, description="Penalty reduction over dims")
    mask_prob: float = Field(0.15, ge=0, lt=1, description="Masking selection probability")
    aligner_target_accuracy: Optional[float] = Field(None, gt=0, le=1, description="Early-stop accuracy")
    gan_epochs: int = Field(3000, ge=0, description="Maximum adversarial epochs")
    gan_max_steps: Optional[int] = Field(None, ge=0, description="Hard cap on adversarial steps")
    disc_lr: float = Field(4e-4, gt=0, description="Discriminator learning rate")
    disc_betas: Tuple[float, float] = Field((0.5, 0.9), description="Discriminator moment decay rates")
    disc_weight_decay: float = Field(1e-4, ge=0, description="Discriminator decoupled weight decay")
    gen_lr: float = Field(1e-4, gt=0, description="Generator learning rate")
    gen_betas: Tuple[float, float] = Field((0.5, 0.9), description="Generator moment decay rates")
    d_steps_per_g: int = Field(1, ge=1, description="Discriminator updates per generator update")
    clip_grad_norm: Optional[float] = Field(None, gt=0, description="Global-norm clipping for rescue runs")
    collapse_window: int = Field(50, ge=1, description="Mode-collapse alarm window")
    collapse_threshold: float = Field(0.1, ge=0, le=1, description="Mode-collapse distinct-ratio threshold")
    eval_every: Optional[int] = Field(None, ge=1, description="Steps between validation FED checks")
    mle_epochs: int = Field(50, ge=0, description="MLE comparison epochs")
    mle_lr: float = Field(1e-3, gt=0, description="MLE learning rate")

    # Evaluation
    eval_token_size: int = Field(5000, ge=2, description="Sentences per set for BLEU metrics")
    eval_embed_size: int = Field(10000, ge=2, description="Sentences per set for embedding metrics")
    validation_size: int = Field(1000, ge=2, description="Sentences used for model selection")
    tau: float = Field(0.65, gt=0, lt=1, description="Coverage similarity threshold")
    coverage_mode: CoverageMode = Field(CoverageMode.MAX, description="Coverage decision rule")
    embedder: Literal["hashed", "file"] = Field("hashed", description="Sentence embedder")
    embedding_sentences: Optional[str] = Field(None, description="Sentence file of the file embedder")
    embedding_file: Optional[str] = Field(None, description="Vector file of the file embedder")
    hash_dim: int = Field(256, ge=1, description="Hashed embedder dimension")
    bleu_max_n: int = Field(5, ge=1, description="Highest BLEU n-gram order")

    # Experiments
    seeds: List[int] = Field([0, 1, 2], min_length=1, description="Seeds of multi-seed experiments")
    probe_batches: int = Field(100, ge=1, description="Batches of the gradient-norm probe")
    probe_batch_size: int = Field(32, ge=1, description="Probe batch size")
    probe_len: int = Field(20, ge=1, description="Probe sequence length")
    probe_input_dim: int = Field(512, ge=1, description="Probe input width")
    probe_hidden: int = Field(512, ge=2, description="Probe hidden width")
    probe_depth: int = Field(2, ge=1, description="Probe stack depth")
    probe_seeds: List[int] = Field([0, 1, 2, 3, 4], min_length=1, description="Seeds of the gradient-norm probe")
    dropout_rates: List[float] = Field(
        [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9], min_length=1, description="Sweep of sampling dropout"
    )
    corruption_rates: List[float] = Field(
        [0.0, 0.02, 0.04, 0.06, 0.08, 0.10], min_length=1, description="Sweep of corruption probabilities"
    )
    sensitivity_size: int = Field(5000, ge=2, description="Sentences in the corruption-sensitivity set")
    sensitivity_tau: float = Field(0.65, gt=0, lt=1, description="Coverage threshold of the sensitivity sweep")
    sensitivity_seeds: List[int] = Field([0, 1, 2, 3, 4], min_length=1, description="Seeds of the sensitivity sweep")
    lambda_a_values: List[float] = Field([0.0, 0.1, 1.0], min_length=1, description="Penalty weights compared")
    n_pairs: int = Field(1000, ge=1, description="Word pairs of the balance error")
    n_interp: int = Field(100, ge=1, description="Interpolation points per pair")
    gate_hidden: int = Field(64, ge=2, description="Width of the output-gate comparison")
    gate_trials: int = Field(20, ge=1, description="Random states of the output-gate comparison")
    gate_output_bias: float = Field(-4.0, description="Output-gate bias that closes the gate")

    @field_validator(
        "aligner_betas", "disc_betas", "gen_betas", "seeds", "probe_seeds", "dropout_rates",
        "corruption_rates", "sensitivity_seeds", "lambda_a_values",
        mode="before",
    )
    @classmethod
    def split_lists(cls, v):
        """Accept comma-separated strings from flat config files."""
        return _split(v)

    @field_validator("aligner_betas", "disc_betas", "gen_betas")
    @classmethod
    def validate_betas(cls, v):
        """Moment decay rates lie in [0, 1)."""
        if not all(0.0 <= beta < 1.0 for beta in v):
            raise ValueError("betas must lie in [0, 1)")
        return v

    @field_validator("dropout_rates")
    @classmethod
    def validate_dropout_rates(cls, v):
        """Sampling rates lie in [0, 1)."""
        if not all(0.0 <= rho < 1.0 for rho in v):
            raise ValueError("dropout rates must lie in [0, 1)")
        return v

    @field_validator("corruption_rates")
    @classmethod
    def validate_corruption_rates(cls, v):
        """Corruption probabilities lie in [0, 1]."""
        if not all(0.0 <= p <= 1.0 for p in v):
            raise ValueError("corruption rates must lie in [0, 1]")
        return v

    @field_validator("lambda_a_values")
    @classmethod
    def validate_lambdas(cls, v):
        if any(value < 0 for value in v):
            raise ValueError("penalty weights must be >= 0")
        return v

    @model_validator(mode="after")
    def validate_combination(self):
        """Cross-field constraints."""
        if self.embed_dim % self.aligner_heads:
            raise ValueError(f"aligner_heads ({self.aligner_heads}) must divide embed_dim ({self.embed_dim})")
        if self.valid_fraction + self.test_fraction >= 1.0:
            raise ValueError("valid_fraction + test_fraction must be < 1")
        if self.embedder == "file" and not (self.embedding_file and self.embedding_sentences):
            raise ValueError("the file embedder needs embedding_file and embedding_sentences")
        return self

    @property
    def gen_batch_size(self) -> int:
        """``bs_g`` under imbalanced batching."""
        from ..core.gan import imbalanced_batch_size

        return imbalanced_batch_size(self.batch_size, self.sampling_dropout)

    def to_flat(self) -> Dict[str, str]:
        """Flat ``KEY=value`` rendering accepted back by :func:`load_run_config`."""
        flat = {}
        for key, value in self.model_dump(mode="json").items():
            if value is None:
                continue
            if isinstance(value, (list, tuple)):
                value = ",".join(str(item) for item in value)
            flat[key] = str(value)
        return flat


FULL_PRESET: Dict[str, Any] = {}

DESK_PRESET: Dict[str, Any] = {
    "grammar_size": 5000,
    "max_len": 12,
    "embed_dim": 64,
    "rep_dim": 64,
    "noise_dim": 16,
    "gen_hidden": 64,
    "disc_hidden": 128,
    "aligner_layers": 2,
    "aligner_heads": 4,
    "aligner_ff_dim": 128,
    "aligner_dropout": 0.1,
    "batch_size": 32,
    "aligner_epochs": 60,
    "aligner_lr": 1e-3,
    "aligner_target_accuracy": 0.95,
    "gan_epochs": 20,
    "gan_max_steps": 2000,
    "eval_every": 250,
    "mle_epochs": 10,
    "eval_token_size": 300,
    "eval_embed_size": 1000,
    "validation_size": 200,
    "probe_input_dim": 64,
    "probe_hidden": 64,
    "probe_len": 12,
    "n_pairs": 200,
}

PRESETS: Dict[str, Dict[str, Any]] = {"full": FULL_PRESET, "paper": FULL_PRESET, "desk": DESK_PRESET}


def parse_overrides(items: Optional[List[str]]) -> Dict[str, str]:
    """Parse ``key=value`` strings."""
    overrides: Dict[str, str] = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override '{item}' is not of the form key=value", field=item)
        overrides[key.strip().lower()] = value.strip()
    return overrides


def read_config_file(path: Path) -> Dict[str, str]:
    """Read a flat ``KEY=value`` file; keys are case-insensitive."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist", field=str(path))
    values: Dict[str, str] = {}
    for key, value in dotenv_values(path).items():
        if value is None:
            raise ConfigError(f"config key '{key}' in {path} has no value", field=key)
        values[key.lower()] = value
    return values


def build_run_config(values: Mapping[str, Any]) -> RunConfig:
    """Validate raw values, translating validation failures into :class:`ConfigError`."""
    try:
        return RunConfig(**values)
    except ValidationError as e:
        fields = ", ".join(".".join(str(part) for part in err["loc"]) for err in e.errors())
        raise ConfigError(f"invalid configuration ({fields}): {e}", field=fields or None) from e


def load_run_config(
    preset: str = "desk",
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    """
    Resolve a run configuration: preset, then file, then overrides, then seed.

    Args:
        preset: ``desk``, or ``full`` (alias ``paper``)
        path: Optional flat config file
        overrides: Explicit key/value overrides
        seed: Optional seed override

    Returns:
        Validated configuration
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}' (choose from {sorted(PRESETS)})", field="preset")
    values: Dict[str, Any] = dict(PRESETS[preset])
    if path is not None:
        values.update(read_config_file(path))
    if overrides:
        values.update({str(k).lower(): v for k, v in overrides.items()})
    if seed is not None:
        values["seed"] = seed
    config = build_run_config(values)
    logger.debug(f"Resolved run configuration from preset '{preset}'")
    return config
