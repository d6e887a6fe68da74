"""
Maximum-Likelihood Comparison Model.

The same recurrent body as the generator, with its own softmax output
layer, trained by teacher forcing on next-token cross-entropy and sampled
ancestrally.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Tuple

import numpy as np
from scipy.special import softmax

from ..models.training import LstmVariant, MleTrainConfig, TraceRecord
from ..utils.validation import DataError, DegenerateInputError, NumericDivergenceError
from .gan import valid_mask
from .numerics import FLOAT, make_rng, softmax_cross_entropy, softmax_cross_entropy_backward
from .optim import Adam, clip_by_global_norm, global_norm
from .recurrent import LstmStack, stack_backward, stack_forward, stack_step

logger = logging.getLogger(__name__)


class MleModel:
    """Embedding, recurrent stack and softmax output."""

    def __init__(
        self,
        vocab_size: int,
        embed_dim: int,
        hidden_dim: int,
        depth: int,
        rng: np.random.Generator,
        variant: LstmVariant = LstmVariant.FULLY_NORMALIZED,
        bos_id: int = 2,
        eos_id: int = 3,
        pad_id: int = 0,
    ):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.depth = depth
        self.variant = LstmVariant(variant)
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.pad_id = pad_id
        self.embedding = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), (vocab_size, embed_dim))
        self.stack = LstmStack.init(embed_dim, hidden_dim, depth, self.variant, rng)
        limit = np.sqrt(6.0 / (hidden_dim + vocab_size))
        self.out_W = rng.uniform(-limit, limit, (hidden_dim, vocab_size))
        self.out_b = np.zeros(vocab_size, dtype=FLOAT)

    def architecture(self) -> Dict[str, Any]:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "depth": self.depth,
            "variant": self.variant.value,
            "bos_id": self.bos_id,
            "eos_id": self.eos_id,
            "pad_id": self.pad_id,
        }

    @classmethod
    def from_architecture(cls, arch: Dict[str, Any]) -> "MleModel":
        return cls(rng=make_rng(0), **arch)

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield "embedding", self.embedding
        yield from self.stack.named_parameters("stack.")
        yield "out.W", self.out_W
        yield "out.b", self.out_b


def mle_loss(model: MleModel, ids: np.ndarray, lengths: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Teacher-forced next-token cross-entropy, averaged over valid positions.

    Args:
        model: Model to evaluate
        ids: ``(B, T)`` targets (sentence plus ``[EOS]``, padded)
        lengths: Non-pad length of each row

    Returns:
        Loss and named gradients
    """
    batch, steps = ids.shape
    inputs = np.concatenate([np.full((batch, 1), model.bos_id, dtype=ids.dtype), ids[:, :-1]], axis=1)
    valid = valid_mask(lengths, steps)
    x = model.embedding[inputs].transpose(1, 0, 2)
    outputs, cache = stack_forward(model.stack, x)
    top = outputs[-1]
    logits = top @ model.out_W + model.out_b
    weights = valid.T.reshape(-1).astype(FLOAT)
    if weights.sum() == 0:
        raise DegenerateInputError("mle_loss needs at least one valid position")
    loss, ce_cache = softmax_cross_entropy(
        logits.reshape(-1, model.vocab_size), ids.T.reshape(-1), weights
    )
    d_logits = softmax_cross_entropy_backward(ce_cache).reshape(logits.shape)
    grads = {
        "out.W": top.reshape(-1, model.hidden_dim).T @ d_logits.reshape(-1, model.vocab_size),
        "out.b": d_logits.reshape(-1, model.vocab_size).sum(axis=0),
    }
    d_inputs, stack_grads = stack_backward(model.stack, cache, d_logits @ model.out_W.T)
    d_embedding = np.zeros_like(model.embedding)
    np.add.at(d_embedding, inputs.T, d_inputs)
    grads["embedding"] = d_embedding
    for name, grad in stack_grads.items():
        grads[f"stack.{name}"] = grad
    return loss, grads


@dataclass
class MleTrainResult:
    model: MleModel
    trace: List[TraceRecord]


def train_mle(
    model: MleModel, ids: np.ndarray, lengths: np.ndarray, config: MleTrainConfig, rng: np.random.Generator
) -> MleTrainResult:
    """Train by teacher forcing; one trace record per epoch."""
    if ids.shape[0] == 0:
        raise DataError("no training sentences")
    optimizer = Adam(dict(model.named_parameters()), lr=config.lr, betas=config.betas)
    trace: List[TraceRecord] = []
    for epoch in range(config.epochs):
        order = rng.permutation(ids.shape[0])
        losses = []
        for start in range(0, ids.shape[0], config.batch_size):
            index = order[start:start + config.batch_size]
            loss, grads = mle_loss(model, ids[index], lengths[index])
            if not np.isfinite(loss):
                raise NumericDivergenceError(f"MLE loss is non-finite in epoch {epoch}", site="mle.loss", trace=trace)
            if config.clip_grad_norm:
                clip_by_global_norm(grads, config.clip_grad_norm)
            else:
                logger.debug(f"MLE grad norm {global_norm(grads):.4f}")
            optimizer.step(grads)
            losses.append(loss)
        record = TraceRecord(phase="mle", step=epoch, loss=float(np.mean(losses)))
        trace.append(record)
        logger.info(f"MLE epoch {epoch}: loss={record.loss:.4f}")
    return MleTrainResult(model=model, trace=trace)


def sample_mle(
    model: MleModel, n: int, steps: int, rng: np.random.Generator, temperature: float = 1.0
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Ancestral sampling.

    Returns:
        ``(n, steps)`` tokens padded after the first ``[EOS]`` and their lengths
    """
    if steps < 1 or n < 1:
        raise DegenerateInputError("sample_mle needs n >= 1 and steps >= 1")
    if temperature <= 0:
        raise DegenerateInputError("temperature must be positive")
    states = model.stack.initial_states(n)
    prev = np.full(n, model.bos_id, dtype=np.int64)
    tokens = np.empty((n, steps), dtype=np.int64)
    for t in range(steps):
        states, _ = stack_step(model.stack, model.embedding[prev], states)
        probs = softmax((states[-1].h @ model.out_W + model.out_b) / temperature, axis=1)
        u = rng.random(n)
        token = np.minimum((np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1), model.vocab_size - 1)
        tokens[:, t] = token
        prev = token
    is_eos = tokens == model.eos_id
    lengths = np.where(is_eos.any(axis=1), is_eos.argmax(axis=1) + 1, steps)
    tokens[~valid_mask(lengths, steps)] = model.pad_id
    return tokens, lengths
