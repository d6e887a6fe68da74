"""
Adversarial Representation Modeling.

This module implements the generator (dropout sampling over a recurrent
stack, projected into aligner representation space and decoded through the
frozen ``F_LT``), the causal recurrent discriminator, the Wasserstein
objectives with a one-sided Lipschitz penalty, and the alternating training
loop with imbalanced batch sizes.

Gradients of the Lipschitz penalty with respect to the discriminator
parameters need a second-order term. It is computed as a central difference
of parameter gradients along the normalized input-gradient direction of
each sequence, which costs two extra forward/backward passes per update.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, Iterator, List, Optional, Protocol, Tuple

import numpy as np

from ..models.training import GanTrainConfig, LstmVariant, TraceRecord
from ..utils.validation import (
    DegenerateInputError,
    NumericDivergenceError,
    ShapeMismatchError,
    check_finite,
    check_probability,
    check_same_shape,
)
from .aligner import AlignerModel, DecodeTransform, decode_words, encode_representations
from .numerics import FLOAT, dropout_mask, make_rng
from .optim import Adam, clip_by_global_norm, global_norm
from .recurrent import LstmStack, StackCache, stack_backward, stack_forward, stack_step

logger = logging.getLogger(__name__)

PENALTY_DELTA = 1e-4

Grads = Dict[str, np.ndarray]


def imbalanced_batch_size(bs_d: int, rho: float) -> int:
    """
    Generator batch size ``round(bs_d / (1 - rho))``.

    Keeps the number of effective (unmasked) generator sub-model updates
    level with discriminator updates. Never below ``bs_d``.
    """
    if bs_d < 1:
        raise DegenerateInputError(f"bs_d must be >= 1, got {bs_d}")
    check_probability(rho, "rho")
    return max(bs_d, int(np.floor(bs_d / (1.0 - rho) + 0.5)))


def dropout_sample(
    prev_word: Any,
    embedding: np.ndarray,
    noise_dim: int,
    rho: float,
    rng: np.random.Generator,
    noise_std: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generator input ``Dropout(E(prev) ++ eps, rho)`` without rescaling.

    Args:
        prev_word: Previous token id, or an array of ids
        embedding: ``(V, E)`` input embedding table
        noise_dim: Width ``N_z`` of the Gaussian noise
        rho: Drop probability
        rng: Random stream (noise first, then the mask)
        noise_std: Noise scale; 0 disables the noise

    Returns:
        ``z`` of width ``E + N_z`` (batched like ``prev_word``) and the mask used
    """
    ids = np.asarray(prev_word)
    scalar = ids.ndim == 0
    ids = np.atleast_1d(ids)
    noise = rng.standard_normal((ids.shape[0], noise_dim)) * noise_std
    x = np.concatenate([embedding[ids], noise], axis=1)
    mask = dropout_mask(x.shape, rho, rng)
    z = x * mask
    if scalar:
        return z[0], mask[0]
    return z, mask


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def valid_mask(lengths: np.ndarray, steps: int) -> np.ndarray:
    """``(B, T)`` boolean mask of positions before each length."""
    return np.arange(steps)[None, :] < np.asarray(lengths)[:, None]


class Generator:
    """Dropout-sampling recurrent generator decoding through a frozen ``F_LT``."""

    def __init__(
        self,
        vocab_size: int,
        embed_dim: int,
        noise_dim: int,
        hidden_dim: int,
        depth: int,
        f_lt: DecodeTransform,
        rho: float,
        rng: np.random.Generator,
        variant: LstmVariant = LstmVariant.FULLY_NORMALIZED,
        noise_std: float = 1.0,
        bos_id: int = 2,
        eos_id: int = 3,
        pad_id: int = 0,
    ):
        """
        Initialize generator weights.

        Args:
            vocab_size: Number of token ids
            embed_dim: Input embedding width ``E``
            noise_dim: Noise width ``N_z``
            hidden_dim: Recurrent width ``H``
            depth: Recurrent layers
            f_lt: Frozen decode transform of the aligner
            rho: Dropout-sampling rate, active in training and inference
            rng: Initialization stream
            variant: Recurrent cell variant
            noise_std: Scale of the concatenated noise
            bos_id: Start token fed at the first step
            eos_id: Token that ends a sequence
            pad_id: Filler written after ``[EOS]``
        """
        check_probability(rho, "rho")
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.noise_dim = noise_dim
        self.hidden_dim = hidden_dim
        self.depth = depth
        self.f_lt = f_lt
        self.rho = rho
        self.variant = LstmVariant(variant)
        self.noise_std = noise_std
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.pad_id = pad_id
        self.embedding = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), (vocab_size, embed_dim))
        self.stack = LstmStack.init(embed_dim + noise_dim, hidden_dim, depth, self.variant, rng)
        self.proj_W = _glorot(rng, hidden_dim, f_lt.rep_dim)
        self.proj_b = np.zeros(f_lt.rep_dim, dtype=FLOAT)

    def architecture(self) -> Dict[str, Any]:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "noise_dim": self.noise_dim,
            "hidden_dim": self.hidden_dim,
            "depth": self.depth,
            "rho": self.rho,
            "variant": self.variant.value,
            "noise_std": self.noise_std,
            "bos_id": self.bos_id,
            "eos_id": self.eos_id,
            "pad_id": self.pad_id,
        }

    @classmethod
    def from_architecture(cls, arch: Dict[str, Any], f_lt: DecodeTransform) -> "Generator":
        return cls(f_lt=f_lt, rng=make_rng(0), **arch)

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield "embedding", self.embedding
        yield from self.stack.named_parameters("stack.")
        yield "proj.W", self.proj_W
        yield "proj.b", self.proj_b


@dataclass
class GenerationCache:
    prev_tokens: np.ndarray
    masks: np.ndarray
    tops: np.ndarray
    stack: StackCache


@dataclass
class GeneratedBatch:
    """Decoded tokens and representations, zeroed/padded after ``[EOS]``."""

    tokens: np.ndarray
    reps: np.ndarray
    lengths: np.ndarray
    cache: GenerationCache

    @property
    def valid(self) -> np.ndarray:
        return valid_mask(self.lengths, self.tokens.shape[1])


def generate(gen: Generator, batch_size: int, steps: int, rng: np.random.Generator) -> GeneratedBatch:
    """
    Autoregressive generation of a batch.

    Each step feeds the previously decoded token (``[BOS]`` first) through
    dropout sampling, the recurrent stack and the projection; the new token
    is ``argmax F_LT(r)``. A sequence's length counts up to and including
    its first ``[EOS]``.
    """
    if steps < 1:
        raise DegenerateInputError(f"generation length must be >= 1, got {steps}")
    states = gen.stack.initial_states(batch_size)
    prev = np.full(batch_size, gen.bos_id, dtype=np.int64)
    width = gen.embed_dim + gen.noise_dim
    prev_tokens = np.empty((steps, batch_size), dtype=np.int64)
    masks = np.empty((steps, batch_size, width), dtype=FLOAT)
    tops = np.empty((steps, batch_size, gen.hidden_dim), dtype=FLOAT)
    tokens = np.empty((batch_size, steps), dtype=np.int64)
    reps = np.empty((batch_size, steps, gen.f_lt.rep_dim), dtype=FLOAT)
    stack_cache = StackCache()
    for t in range(steps):
        z, mask = dropout_sample(prev, gen.embedding, gen.noise_dim, gen.rho, rng, gen.noise_std)
        states, caches = stack_step(gen.stack, z, states)
        stack_cache.steps.append(caches)
        top = states[-1].h
        r = top @ gen.proj_W + gen.proj_b
        token = decode_words(gen.f_lt, r)
        prev_tokens[t] = prev
        masks[t] = mask
        tops[t] = top
        reps[:, t] = r
        tokens[:, t] = token
        prev = token

    is_eos = tokens == gen.eos_id
    lengths = np.where(is_eos.any(axis=1), is_eos.argmax(axis=1) + 1, steps)
    valid = valid_mask(lengths, steps)
    tokens[~valid] = gen.pad_id
    reps *= valid[:, :, None]
    check_finite(reps, "generator.representations")
    cache = GenerationCache(prev_tokens=prev_tokens, masks=masks, tops=tops, stack=stack_cache)
    return GeneratedBatch(tokens=tokens, reps=reps, lengths=lengths, cache=cache)


def generate_sequence(gen: Generator, steps: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """One sequence, truncated after ``[EOS]``: ``(ids, representations)``."""
    batch = generate(gen, 1, steps, rng)
    length = int(batch.lengths[0])
    return batch.tokens[0, :length], batch.reps[0, :length]


def generator_backward(gen: Generator, batch: GeneratedBatch, d_reps: np.ndarray) -> Grads:
    """
    Generator parameter gradients given ``dL/d(representations)``.

    Decoded tokens fed back as inputs are constants.
    """
    check_same_shape(d_reps, batch.reps, ("d_reps", "reps"))
    d_time = (d_reps * batch.valid[:, :, None]).transpose(1, 0, 2)
    cache = batch.cache
    grads: Grads = {
        "proj.W": cache.tops.reshape(-1, gen.hidden_dim).T @ d_time.reshape(-1, d_time.shape[-1]),
        "proj.b": d_time.reshape(-1, d_time.shape[-1]).sum(axis=0),
    }
    d_inputs, stack_grads = stack_backward(gen.stack, cache.stack, d_time @ gen.proj_W.T)
    d_z = d_inputs * cache.masks
    d_embedding = np.zeros_like(gen.embedding)
    np.add.at(d_embedding, cache.prev_tokens, d_z[:, :, : gen.embed_dim])
    grads["embedding"] = d_embedding
    for name, grad in stack_grads.items():
        grads[f"stack.{name}"] = grad
    return grads


class Critic(Protocol):
    """Anything that scores representation sequences and backpropagates pooled scores."""

    def score(
        self, r: np.ndarray, lengths: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, np.ndarray, Any]: ...

    def backward(self, cache: Any, d_pooled: np.ndarray) -> Tuple[np.ndarray, Grads]: ...

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]: ...


@dataclass
class DiscriminatorCache:
    r_shape: Tuple[int, ...]
    lengths: np.ndarray
    valid: np.ndarray
    top: np.ndarray
    stack: StackCache


@dataclass
class Discriminator:
    """Causal recurrent critic with a per-timestep scalar head."""

    stack: LstmStack
    head_w: np.ndarray
    head_b: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=FLOAT))

    def __post_init__(self) -> None:
        if self.head_w.shape != (self.stack.hidden_dim,) or self.head_b.shape != (1,):
            raise ShapeMismatchError("discriminator head must be (H,) weights and a (1,) bias")

    @classmethod
    def init(
        cls, rep_dim: int, hidden_dim: int, depth: int, variant: LstmVariant, rng: np.random.Generator
    ) -> "Discriminator":
        stack = LstmStack.init(rep_dim, hidden_dim, depth, variant, rng)
        head_w = rng.uniform(-1.0, 1.0, hidden_dim) / np.sqrt(hidden_dim)
        return cls(stack=stack, head_w=head_w)

    def architecture(self) -> Dict[str, Any]:
        return {
            "rep_dim": self.stack.input_dim,
            "hidden_dim": self.stack.hidden_dim,
            "depth": self.stack.depth,
            "variant": self.stack.variant.value,
        }

    @classmethod
    def from_architecture(cls, arch: Dict[str, Any]) -> "Discriminator":
        return cls.init(arch["rep_dim"], arch["hidden_dim"], arch["depth"], LstmVariant(arch["variant"]), make_rng(0))

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield from self.stack.named_parameters("stack.")
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def score(
        self, r: np.ndarray, lengths: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, np.ndarray, DiscriminatorCache]:
        """
        Per-step scores ``(B, T)`` and pooled scores ``(B,)``.

        The pooled score is the mean of the per-step scores over the first
        ``lengths[b]`` steps (all steps when ``lengths`` is None).
        """
        if r.ndim != 3:
            raise ShapeMismatchError(f"representations must be (B, T, E_r), got {r.shape}")
        check_finite(r, "discriminator.input")
        batch, steps = r.shape[0], r.shape[1]
        lengths = np.full(batch, steps, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (batch,) or lengths.min(initial=1) < 1 or lengths.max(initial=1) > steps:
            raise ShapeMismatchError("lengths must be (B,) with values in [1, T]")
        outputs, stack_cache = stack_forward(self.stack, r.transpose(1, 0, 2))
        top = outputs[-1]
        scores = (top @ self.head_w + self.head_b[0]).T
        valid = valid_mask(lengths, steps)
        pooled = np.sum(scores * valid, axis=1) / lengths
        check_finite(pooled, "discriminator.score")
        cache = DiscriminatorCache(r_shape=r.shape, lengths=lengths, valid=valid, top=top, stack=stack_cache)
        return scores, pooled, cache

    def backward(self, cache: DiscriminatorCache, d_pooled: np.ndarray) -> Tuple[np.ndarray, Grads]:
        """Input and parameter gradients given ``dL/d(pooled)``."""
        d_scores = (np.asarray(d_pooled, dtype=FLOAT)[:, None] * cache.valid / cache.lengths[:, None]).T
        grads: Grads = {
            "head.w": np.einsum("tbh,tb->h", cache.top, d_scores),
            "head.b": np.array([d_scores.sum()]),
        }
        d_top = d_scores[:, :, None] * self.head_w
        d_inputs, stack_grads = stack_backward(self.stack, cache.stack, d_top)
        for name, grad in stack_grads.items():
            grads[f"stack.{name}"] = grad
        return d_inputs.transpose(1, 0, 2), grads


def discriminator_score(
    disc: Critic, r: np.ndarray, lengths: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-step and pooled scores."""
    scores, pooled, _ = disc.score(r, lengths)
    return scores, pooled


@dataclass
class PenaltyTerms:
    value: float
    grad_norms: np.ndarray
    mix: np.ndarray
    grads: Grads


def _add_grads(total: Grads, grads: Grads, scale: float = 1.0) -> None:
    for name, grad in grads.items():
        total[name] = total[name] + scale * grad if name in total else scale * grad


def lipschitz_penalty_terms(
    critic: Critic,
    r_d: np.ndarray,
    r_g: np.ndarray,
    rng: np.random.Generator,
    lengths: Optional[np.ndarray] = None,
    mix: Optional[np.ndarray] = None,
    with_grads: bool = False,
    delta: float = PENALTY_DELTA,
) -> PenaltyTerms:
    """
    One-sided Lipschitz penalty ``mean_b max(0, ||grad_r D(r_m)|| - 1)^2``.

    ``r_m = eps * r_d + (1 - eps) * r_g`` uses one ``eps ~ U[0, 1]`` per
    sequence; the gradient norm is taken over the whole sequence input of
    the pooled score.

    Args:
        critic: Scores sequences
        r_d: Real representations ``(B, T, E_r)``
        r_g: Generated representations, same shape
        rng: Stream for the mixing weights
        lengths: Valid lengths of the interpolates
        mix: Explicit mixing weights ``(B,)``
        with_grads: Also compute parameter gradients of the penalty
        delta: Step of the central difference along the input gradient

    Returns:
        Penalty value, per-sequence gradient norms, mixing weights, gradients
    """
    check_same_shape(r_d, r_g, ("r_d", "r_g"))
    batch = r_d.shape[0]
    if mix is None:
        mix = rng.uniform(0.0, 1.0, size=batch)
    r_m = mix[:, None, None] * r_d + (1.0 - mix)[:, None, None] * r_g
    _, _, cache = critic.score(r_m, lengths)
    input_grad, _ = critic.backward(cache, np.ones(batch, dtype=FLOAT))
    norms = np.sqrt(np.sum(input_grad * input_grad, axis=(1, 2)))
    excess = np.maximum(norms - 1.0, 0.0)
    value = float(np.mean(excess * excess))

    grads: Grads = {name: np.zeros_like(array) for name, array in critic.named_parameters()}
    if with_grads and np.any(excess > 0.0):
        coef = 2.0 * excess / batch
        safe = np.where(excess > 0.0, norms, 1.0)
        direction = input_grad / safe[:, None, None] * (excess > 0.0)[:, None, None]
        for sign in (1.0, -1.0):
            _, _, shifted = critic.score(r_m + sign * delta * direction, lengths)
            _, shifted_grads = critic.backward(shifted, sign * coef / (2.0 * delta))
            _add_grads(grads, shifted_grads)
    return PenaltyTerms(value=value, grad_norms=norms, mix=mix, grads=grads)


def lipschitz_penalty(
    critic: Critic,
    r_d: np.ndarray,
    r_g: np.ndarray,
    rng: np.random.Generator,
    lengths: Optional[np.ndarray] = None,
) -> float:
    """Penalty value only; see :func:`lipschitz_penalty_terms`."""
    return lipschitz_penalty_terms(critic, r_d, r_g, rng, lengths).value


@dataclass
class CriticLoss:
    loss: float
    penalty: float
    wasserstein: float
    grads: Grads


def discriminator_loss(
    disc: Critic,
    r_d: np.ndarray,
    r_g: np.ndarray,
    lambda_d: float,
    rng: np.random.Generator,
    lengths_d: Optional[np.ndarray] = None,
    lengths_g: Optional[np.ndarray] = None,
    mix: Optional[np.ndarray] = None,
) -> CriticLoss:
    """
    ``mean D(r_g) - mean D(r_d) + lambda_d * R`` and its parameter gradients.

    Interpolates are scored over the longer of the two lengths.
    """
    check_same_shape(r_d, r_g, ("r_d", "r_g"))
    batch, steps = r_d.shape[0], r_d.shape[1]
    _, pooled_d, cache_d = disc.score(r_d, lengths_d)
    _, pooled_g, cache_g = disc.score(r_g, lengths_g)
    lengths_m = None
    if lengths_d is not None or lengths_g is not None:
        full = np.full(batch, steps, dtype=np.int64)
        lengths_m = np.maximum(full if lengths_d is None else lengths_d, full if lengths_g is None else lengths_g)
    penalty = lipschitz_penalty_terms(disc, r_d, r_g, rng, lengths_m, mix, with_grads=True)
    wasserstein = float(np.mean(pooled_d) - np.mean(pooled_g))
    loss = -wasserstein + lambda_d * penalty.value
    if not np.isfinite(loss):
        raise NumericDivergenceError("discriminator loss is non-finite", site="gan.discriminator_loss")

    _, grads = disc.backward(cache_g, np.full(batch, 1.0 / batch))
    _, grads_d = disc.backward(cache_d, np.full(batch, -1.0 / batch))
    _add_grads(grads, grads_d)
    _add_grads(grads, penalty.grads, lambda_d)
    return CriticLoss(loss=loss, penalty=penalty.value, wasserstein=wasserstein, grads=grads)


def generator_loss(
    disc: Critic, r_g: np.ndarray, lengths: Optional[np.ndarray] = None
) -> Tuple[float, np.ndarray]:
    """
    ``-mean D(r_g)``.

    Returns:
        Loss and its gradient with respect to ``r_g``
    """
    batch = r_g.shape[0]
    _, pooled, cache = disc.score(r_g, lengths)
    loss = -float(np.mean(pooled))
    d_r, _ = disc.backward(cache, np.full(batch, -1.0 / batch))
    return loss, d_r


def distinct_ratio(tokens: np.ndarray, lengths: Optional[np.ndarray] = None) -> float:
    """Distinct sequences over batch size."""
    if tokens.shape[0] == 0:
        raise DegenerateInputError("distinct_ratio of an empty batch")
    if lengths is None:
        lengths = np.full(tokens.shape[0], tokens.shape[1])
    distinct = {tuple(row[:length].tolist()) for row, length in zip(tokens, lengths)}
    return len(distinct) / tokens.shape[0]


def real_representations(aligner: AlignerModel, ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Aligner means of real sentences, zeroed after each length."""
    return encode_representations(aligner, ids) * valid_mask(lengths, ids.shape[1])[:, :, None]


@dataclass
class GanTrainResult:
    generator: Generator
    discriminator: Discriminator
    trace: List[TraceRecord]
    steps_run: int
    best_step: Optional[int] = None
    best_score: Optional[float] = None


EvalFn = Callable[[Generator], float]


def _norm_or_clip(grads: Grads, max_norm: Optional[float], site: str) -> float:
    norm = clip_by_global_norm(grads, max_norm) if max_norm else global_norm(grads)
    check_finite(norm, site)
    return norm


def _snapshot(gen: Generator) -> Dict[str, np.ndarray]:
    return {name: array.copy() for name, array in gen.named_parameters()}


def train_gan(
    gen: Generator,
    disc: Discriminator,
    aligner: AlignerModel,
    real_ids: np.ndarray,
    real_lengths: np.ndarray,
    config: GanTrainConfig,
    rng: np.random.Generator,
    evaluate: Optional[EvalFn] = None,
) -> GanTrainResult:
    """
    Alternating adversarial training.

    Each outer step performs ``d_steps_per_g`` discriminator updates on
    ``bs_d`` real/generated pairs (real = aligner means) and one generator
    update on ``bs_g`` fresh sequences. When ``evaluate`` is given it is
    called every ``eval_every`` steps (lower is better) and the best
    generator parameters are restored at the end.

    Args:
        gen: Generator, updated in place
        disc: Discriminator, updated in place
        aligner: Frozen aligner
        real_ids: ``(N, T)`` encoded training sentences, ``T == config.max_len``
        real_lengths: Non-pad length of each row
        config: Training hyperparameters
        rng: Random stream
        evaluate: Optional model-selection score (e.g. validation FED)

    Returns:
        Trained models and the per-step trace
    """
    if not aligner.frozen:
        raise DegenerateInputError("adversarial training needs a frozen aligner")
    if real_ids.shape[0] == 0:
        raise DegenerateInputError("no real sentences")
    steps = config.max_len
    if real_ids.shape[1] != steps:
        raise ShapeMismatchError(f"real sentences are padded to {real_ids.shape[1]}, expected {steps}")

    n_real = real_ids.shape[0]
    steps_per_epoch = int(np.ceil(n_real / config.bs_d))
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    bs_g = config.bs_g
    disc_opt = Adam(
        dict(disc.named_parameters()), lr=config.disc_lr, betas=config.disc_betas, weight_decay=config.disc_weight_decay
    )
    gen_opt = Adam(dict(gen.named_parameters()), lr=config.gen_lr, betas=config.gen_betas)
    logger.info(f"Adversarial training: {total_steps} steps, bs_d={config.bs_d}, bs_g={bs_g}, rho={config.rho}")

    trace: List[TraceRecord] = []
    window: Deque[float] = deque(maxlen=config.collapse_window)
    collapsed = False
    best: Optional[Dict[str, np.ndarray]] = None
    best_step: Optional[int] = None
    best_score: Optional[float] = None

    for step in range(total_steps):
        try:
            for _ in range(config.d_steps_per_g):
                index = rng.choice(n_real, size=config.bs_d, replace=n_real < config.bs_d)
                lengths_d = real_lengths[index]
                r_d = real_representations(aligner, real_ids[index], lengths_d)
                fake = generate(gen, config.bs_d, steps, rng)
                critic = discriminator_loss(disc, r_d, fake.reps, config.lambda_d, rng, lengths_d, fake.lengths)
                grad_norm_d = _norm_or_clip(critic.grads, config.clip_grad_norm, "gan.discriminator_grads")
                disc_opt.step(critic.grads)

            fake = generate(gen, bs_g, steps, rng)
            loss_g, d_reps = generator_loss(disc, fake.reps, fake.lengths)
            check_finite(loss_g, "gan.generator_loss")
            gen_grads = generator_backward(gen, fake, d_reps)
            grad_norm_g = _norm_or_clip(gen_grads, config.clip_grad_norm, "gan.generator_grads")
            gen_opt.step(gen_grads)
        except NumericDivergenceError as e:
            logger.error(f"Adversarial training diverged at step {step} ({e.site})")
            e.trace = list(trace)
            raise

        ratio = distinct_ratio(fake.tokens, fake.lengths)
        window.append(ratio)
        if len(window) == window.maxlen:
            low = float(np.mean(window)) < config.collapse_threshold
            if low and not collapsed:
                logger.warning(
                    f"Mode-collapse alarm at step {step}: distinct ratio {np.mean(window):.3f} "
                    f"over the last {len(window)} steps"
                )
            collapsed = low

        record = TraceRecord(
            phase="gan",
            step=step,
            loss_d=critic.loss,
            loss_g=loss_g,
            penalty=critic.penalty,
            wasserstein=critic.wasserstein,
            grad_norm_d=grad_norm_d,
            grad_norm_g=grad_norm_g,
            distinct_ratio=ratio,
        )
        if evaluate is not None and config.eval_every and (step + 1) % config.eval_every == 0:
            score = float(evaluate(gen))
            record.eval_fed = score
            if best_score is None or score < best_score:
                best, best_step, best_score = _snapshot(gen), step, score
            logger.info(f"Step {step}: validation score {score:.6f} (best {best_score:.6f} at {best_step})")
        trace.append(record)
        if step % 100 == 0:
            logger.info(
                f"GAN step {step}: L_D={critic.loss:.4f} L_G={loss_g:.4f} R={critic.penalty:.4f} "
                f"W={critic.wasserstein:.4f} distinct={ratio:.3f}"
            )
        else:
            logger.debug(f"GAN step {step}: L_D={critic.loss:.6f} L_G={loss_g:.6f}")

    if best is not None:
        for name, array in gen.named_parameters():
            array[...] = best[name]
        logger.info(f"Restored generator from step {best_step} (score {best_score:.6f})")
    return GanTrainResult(
        generator=gen, discriminator=disc, trace=trace, steps_run=total_steps, best_step=best_step, best_score=best_score
    )
