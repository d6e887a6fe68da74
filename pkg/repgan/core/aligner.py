"""
Aligner.

A masked self-attention encoder that maps every word to a Gaussian region
``N(mu, sigma^2)`` of representation space, trained with reconstruction
cross-entropy, a KL term towards ``N(0, I)`` and a penalty on
``log sigma^2``. The aligner also owns the decode transform ``F_LT``
(representations to word logits), which the generator reuses frozen.
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..models.training import AlignerObjective, AlignerTrainConfig, PenaltyReduction, TraceRecord
from ..utils.validation import (
    DataError,
    DegenerateInputError,
    FrozenParameterError,
    NumericDivergenceError,
    ShapeMismatchError,
    check_finite,
    check_same_shape,
)
from .corpus import RESERVED_TOKENS, Vocabulary
from .encoder import TransformerEncoder
from .numerics import FLOAT, affine, affine_backward, child_seed, make_rng, softmax_cross_entropy, softmax_cross_entropy_backward
from .optim import Adam

logger = logging.getLogger(__name__)

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0
SELECT_PROB = 0.15
MASK_SPLIT = (0.8, 0.1, 0.1)


class MaskAction(IntEnum):
    """Per-position masking decision."""
    KEEP_UNSELECTED = 0
    MASK = 1
    RANDOM_REPLACE = 2
    KEEP_SELECTED = 3


@dataclass
class MaskedBatch:
    """A corrupted batch and the positions the loss is computed at."""

    corrupted: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    targets: np.ndarray
    actions: np.ndarray

    @property
    def n_targets(self) -> int:
        return int(self.targets.shape[0])


def mask_batch(
    batch: np.ndarray, vocab: Vocabulary, rng: np.random.Generator, mask_prob: float = SELECT_PROB
) -> MaskedBatch:
    """
    Select and corrupt positions for masked reconstruction.

    Each non-pad position is selected with probability ``mask_prob``; a
    selected position becomes ``[MASK]`` (80%), a uniformly random word
    (10%) or stays unchanged (10%). A sentence whose expected selection
    count is at least one but which drew none gets one uniformly chosen
    position.

    Args:
        batch: ``(B, T)`` token ids
        vocab: Vocabulary the ids belong to
        rng: Random stream
        mask_prob: Selection probability in [0, 1)

    Returns:
        Masked batch with target positions in row-major order
    """
    if batch.size == 0:
        raise DegenerateInputError("cannot mask an empty batch")
    if batch.min() < 0 or batch.max() >= vocab.size:
        raise DegenerateInputError(f"token ids must lie in [0, {vocab.size})")
    if vocab.size <= vocab.n_reserved:
        raise DataError("vocabulary has no words to draw replacements from")

    eligible = batch != vocab.pad_id
    selected = (rng.random(batch.shape) < mask_prob) & eligible
    if mask_prob > 0.0:
        short_of_one = (eligible.sum(axis=1) * mask_prob >= 1.0) & ~selected.any(axis=1)
        for row in np.flatnonzero(short_of_one):
            selected[row, rng.choice(np.flatnonzero(eligible[row]))] = True

    u = rng.random(batch.shape)
    replacements = rng.integers(vocab.n_reserved, vocab.size, size=batch.shape)
    mask_cut = MASK_SPLIT[0]
    random_cut = MASK_SPLIT[0] + MASK_SPLIT[1]
    actions = np.zeros(batch.shape, dtype=np.int8)
    actions[selected & (u < mask_cut)] = MaskAction.MASK
    actions[selected & (u >= mask_cut) & (u < random_cut)] = MaskAction.RANDOM_REPLACE
    actions[selected & (u >= random_cut)] = MaskAction.KEEP_SELECTED

    corrupted = batch.copy()
    corrupted[actions == MaskAction.MASK] = vocab.mask_id
    random_positions = actions == MaskAction.RANDOM_REPLACE
    corrupted[random_positions] = replacements[random_positions]
    rows, cols = np.nonzero(selected)
    return MaskedBatch(corrupted=corrupted, rows=rows, cols=cols, targets=batch[rows, cols], actions=actions)


@dataclass
class DecodeTransform:
    """The affine map ``F_LT`` from representations to word logits."""

    W: np.ndarray
    b: np.ndarray

    def logits(self, r: np.ndarray) -> np.ndarray:
        return r @ self.W + self.b

    @property
    def rep_dim(self) -> int:
        return int(self.W.shape[0])

    @property
    def vocab_size(self) -> int:
        return int(self.W.shape[1])


def decode_words(f_lt: DecodeTransform, r: np.ndarray) -> np.ndarray:
    """
    Argmax decode of representations ``(..., E_r)`` to token ids.

    Ties resolve to the lowest id.
    """
    if r.shape[-1] != f_lt.rep_dim:
        raise ShapeMismatchError(f"representation width {r.shape[-1]} != F_LT input {f_lt.rep_dim}")
    return np.argmax(f_lt.logits(r), axis=-1)


@dataclass
class AlignerCache:
    encoder: Any
    features: np.ndarray
    logvar_live: np.ndarray


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


class AlignerModel:
    """Masked encoder with Gaussian heads and the decode transform."""

    def __init__(
        self,
        vocab_size: int,
        width: int,
        rep_dim: int,
        ff_width: int,
        layers: int,
        heads: int,
        max_len: int,
        dropout: float,
        rng: np.random.Generator,
        n_reserved: int = len(RESERVED_TOKENS),
    ):
        """
        Initialize aligner weights.

        Args:
            vocab_size: Number of token ids ``V``
            width: Encoder width ``E``
            rep_dim: Representation width ``E_r``
            ff_width: Encoder feed-forward width
            layers: Encoder depth
            heads: Attention heads
            max_len: Longest input sequence
            dropout: Encoder dropout rate during training
            rng: Initialization stream
            n_reserved: Number of leading reserved ids (excluded from word scans)
        """
        self.vocab_size = vocab_size
        self.width = width
        self.rep_dim = rep_dim
        self.ff_width = ff_width
        self.layers = layers
        self.heads = heads
        self.max_len = max_len
        self.dropout = dropout
        self.n_reserved = n_reserved
        self.encoder = TransformerEncoder(vocab_size, width, ff_width, layers, heads, max_len, rng)
        self.mu_W = _glorot(rng, width, rep_dim)
        self.mu_b = np.zeros(rep_dim, dtype=FLOAT)
        self.logvar_W = _glorot(rng, width, rep_dim) * 0.1
        self.logvar_b = np.zeros(rep_dim, dtype=FLOAT)
        self.f_lt_W = _glorot(rng, rep_dim, vocab_size)
        self.f_lt_b = np.zeros(vocab_size, dtype=FLOAT)
        self.frozen = False

    def architecture(self) -> Dict[str, Any]:
        return {
            "vocab_size": self.vocab_size,
            "width": self.width,
            "rep_dim": self.rep_dim,
            "ff_width": self.ff_width,
            "layers": self.layers,
            "heads": self.heads,
            "max_len": self.max_len,
            "dropout": self.dropout,
            "n_reserved": self.n_reserved,
        }

    @classmethod
    def from_architecture(cls, arch: Dict[str, Any]) -> "AlignerModel":
        """Skeleton with the given shapes; weights are expected to be overwritten."""
        return cls(rng=make_rng(0), **arch)

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name, array in self.encoder.named_parameters():
            yield f"encoder.{name}", array
        yield "mu.W", self.mu_W
        yield "mu.b", self.mu_b
        yield "logvar.W", self.logvar_W
        yield "logvar.b", self.logvar_b
        yield "f_lt.W", self.f_lt_W
        yield "f_lt.b", self.f_lt_b

    @property
    def f_lt(self) -> DecodeTransform:
        return DecodeTransform(W=self.f_lt_W, b=self.f_lt_b)

    @property
    def word_ids(self) -> np.ndarray:
        return np.arange(self.n_reserved, self.vocab_size)

    def freeze(self) -> None:
        """Make every parameter array read-only."""
        for _, array in self.named_parameters():
            array.flags.writeable = False
        self.frozen = True

    def forward(
        self, ids: np.ndarray, rng: Optional[np.random.Generator] = None
    ) -> Tuple[np.ndarray, np.ndarray, AlignerCache]:
        """
        Encode ``(B, T)`` ids into ``(mu, log sigma^2)``, each ``(B, T, E_r)``.

        Dropout is applied only when ``rng`` is given.
        """
        key_mask = ids != 0
        features, enc_cache = self.encoder.forward(ids, key_mask, self.dropout if rng is not None else 0.0, rng)
        mu = features @ self.mu_W + self.mu_b
        raw_logvar = features @ self.logvar_W + self.logvar_b
        logvar = np.clip(raw_logvar, LOGVAR_MIN, LOGVAR_MAX)
        check_finite(mu, "aligner.mu")
        check_finite(logvar, "aligner.logvar")
        live = (raw_logvar >= LOGVAR_MIN) & (raw_logvar <= LOGVAR_MAX)
        return mu, logvar, AlignerCache(encoder=enc_cache, features=features, logvar_live=live)

    def backward(self, cache: AlignerCache, dmu: np.ndarray, dlogvar: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of all parameters except ``F_LT``."""
        dlogvar = dlogvar * cache.logvar_live
        feats = cache.features.reshape(-1, self.width)
        grads = {
            "mu.W": feats.T @ dmu.reshape(-1, self.rep_dim),
            "mu.b": dmu.reshape(-1, self.rep_dim).sum(axis=0),
            "logvar.W": feats.T @ dlogvar.reshape(-1, self.rep_dim),
            "logvar.b": dlogvar.reshape(-1, self.rep_dim).sum(axis=0),
        }
        dfeatures = dmu @ self.mu_W.T + dlogvar @ self.logvar_W.T
        for name, grad in self.encoder.backward(cache.encoder, dfeatures).items():
            grads[f"encoder.{name}"] = grad
        return grads


def aligner_forward(model: AlignerModel, batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic ``(mu, log sigma^2)`` for a corrupted or clean batch."""
    mu, logvar, _ = model.forward(batch)
    return mu, logvar


def reparameterize(
    mu: np.ndarray,
    logvar: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    ``z = mu + sigma * eps`` with ``eps ~ N(0, I)``.

    Args:
        mu: Means
        logvar: Log variances, same shape
        rng: Stream for ``eps`` (ignored when ``noise`` is given)
        noise: Explicit ``eps``
    """
    check_same_shape(mu, logvar, ("mu", "logvar"))
    if noise is None:
        if rng is None:
            raise DegenerateInputError("reparameterize needs an rng or explicit noise")
        noise = rng.standard_normal(mu.shape)
    return mu + np.exp(0.5 * logvar) * noise


def reparameterize_backward(
    logvar: np.ndarray, noise: np.ndarray, dz: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """``(dmu, dlogvar)``; the noise is a constant."""
    return dz, dz * noise * 0.5 * np.exp(0.5 * logvar)


@dataclass
class AlignerLoss:
    loss: float
    reconstruction: float
    kl: float
    penalty: float
    dlogits: np.ndarray
    dmu: np.ndarray
    dlogvar: np.ndarray


def aligner_loss(
    logits: np.ndarray,
    targets: np.ndarray,
    mu: np.ndarray,
    logvar: np.ndarray,
    lambda_a: float,
    objective: AlignerObjective = AlignerObjective.VARIANCE_PENALIZED,
    reduction: PenaltyReduction = PenaltyReduction.MEAN,
) -> AlignerLoss:
    """
    Masked aligner objective at the target positions.

    The KL of ``N(mu, sigma^2)`` against ``N(0, I)`` is summed over
    representation dimensions; the penalty ``lambda_a * log sigma^2`` is
    averaged over dimensions (or summed, per ``reduction``). All three terms
    are averaged over target positions.

    Args:
        logits: ``(N, V)`` logits at the targets
        targets: ``(N,)`` original token ids
        mu: ``(N, E_r)`` means at the targets
        logvar: ``(N, E_r)`` log variances at the targets
        lambda_a: Penalty weight (>= 0)
        objective: ``cross_entropy`` drops the KL and penalty terms
        reduction: Reduction of the penalty over dimensions

    Returns:
        Loss components and gradients with respect to logits, mu and logvar
    """
    if lambda_a < 0:
        raise DegenerateInputError(f"lambda_a must be >= 0, got {lambda_a}")
    n_targets = targets.shape[0]
    if n_targets == 0:
        raise DegenerateInputError("aligner loss is undefined without target positions")
    check_same_shape(mu, logvar, ("mu", "logvar"))

    reconstruction, ce_cache = softmax_cross_entropy(logits, targets)
    dlogits = softmax_cross_entropy_backward(ce_cache)
    if objective == AlignerObjective.CROSS_ENTROPY:
        zeros = np.zeros_like(mu)
        return AlignerLoss(reconstruction, reconstruction, 0.0, 0.0, dlogits, zeros, zeros.copy())

    var = np.exp(logvar)
    kl = float(np.sum(0.5 * (mu * mu + var - 1.0 - logvar)) / n_targets)
    dims = 1.0 if reduction == PenaltyReduction.SUM else float(mu.shape[-1])
    penalty = float(lambda_a * np.sum(logvar) / (n_targets * dims))
    dmu = mu / n_targets
    dlogvar = 0.5 * (var - 1.0) / n_targets + lambda_a / (n_targets * dims)
    return AlignerLoss(reconstruction + kl + penalty, reconstruction, kl, penalty, dlogits, dmu, dlogvar)


@dataclass
class AlignerStep:
    loss: AlignerLoss
    grads: Dict[str, np.ndarray]
    correct: int
    count: int


def aligner_step(
    model: AlignerModel,
    masked: MaskedBatch,
    config: AlignerTrainConfig,
    rng: Optional[np.random.Generator],
) -> AlignerStep:
    """Loss and gradients of one masked batch (dropout on when ``rng`` is given)."""
    mu, logvar, cache = model.forward(masked.corrupted, rng)
    mu_t = mu[masked.rows, masked.cols]
    logvar_t = logvar[masked.rows, masked.cols]
    variational = config.objective == AlignerObjective.VARIANCE_PENALIZED
    if variational:
        if rng is None:
            raise DegenerateInputError("the variance-penalized objective samples and needs an rng")
        noise = rng.standard_normal(mu_t.shape)
        z = reparameterize(mu_t, logvar_t, noise=noise)
    else:
        z = mu_t
    logits, f_cache = affine(z, model.f_lt_W, model.f_lt_b)
    terms = aligner_loss(logits, masked.targets, mu_t, logvar_t, config.lambda_a, config.objective, config.penalty_reduction)
    dz, dW, db = affine_backward(f_cache, terms.dlogits)
    if variational:
        dmu_z, dlogvar_z = reparameterize_backward(logvar_t, noise, dz)
    else:
        dmu_z, dlogvar_z = dz, np.zeros_like(dz)

    dmu = np.zeros_like(mu)
    dlogvar = np.zeros_like(logvar)
    dmu[masked.rows, masked.cols] = terms.dmu + dmu_z
    dlogvar[masked.rows, masked.cols] = terms.dlogvar + dlogvar_z
    grads = model.backward(cache, dmu, dlogvar)
    grads["f_lt.W"] = dW
    grads["f_lt.b"] = db
    correct = int(np.sum(np.argmax(logits, axis=-1) == masked.targets))
    return AlignerStep(loss=terms, grads=grads, correct=correct, count=masked.n_targets)


def masked_accuracy(
    model: AlignerModel,
    batch: np.ndarray,
    vocab: Vocabulary,
    rng: np.random.Generator,
    mask_prob: float = SELECT_PROB,
    chunk: int = 256,
) -> float:
    """Fraction of masked positions recovered by decoding ``mu`` through ``F_LT``."""
    correct = 0
    total = 0
    for start in range(0, batch.shape[0], chunk):
        masked = mask_batch(batch[start:start + chunk], vocab, rng, mask_prob)
        if masked.n_targets == 0:
            continue
        mu, _ = aligner_forward(model, masked.corrupted)
        decoded = decode_words(model.f_lt, mu[masked.rows, masked.cols])
        correct += int(np.sum(decoded == masked.targets))
        total += masked.n_targets
    return correct / total if total else 0.0


@dataclass
class AlignerTrainResult:
    model: AlignerModel
    trace: List[TraceRecord]
    epochs_run: int


def train_aligner(
    model: AlignerModel,
    ids: np.ndarray,
    vocab: Vocabulary,
    config: AlignerTrainConfig,
    rng: np.random.Generator,
) -> AlignerTrainResult:
    """
    Train the aligner on a padded corpus and freeze it.

    Args:
        model: Aligner to train in place
        ids: ``(N, T)`` encoded training sentences
        vocab: Vocabulary of ``ids``
        config: Training hyperparameters
        rng: Random stream (shuffling, masking, dropout, sampling)

    Returns:
        The frozen model and its per-epoch trace
    """
    if model.frozen:
        raise FrozenParameterError("aligner is already frozen")
    if ids.shape[0] == 0:
        raise DataError("no training sentences")
    optimizer = Adam(
        dict(model.named_parameters()),
        lr=config.lr,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )
    eval_rows = ids[: min(ids.shape[0], 1024)]
    eval_seed = child_seed(rng)
    trace: List[TraceRecord] = []
    epochs_run = 0

    for epoch in range(config.epochs):
        order = rng.permutation(ids.shape[0])
        losses = []
        correct = 0
        count = 0
        for start in range(0, ids.shape[0], config.batch_size):
            masked = mask_batch(ids[order[start:start + config.batch_size]], vocab, rng, config.mask_prob)
            if masked.n_targets == 0:
                continue
            step = aligner_step(model, masked, config, rng)
            if not np.isfinite(step.loss.loss):
                raise NumericDivergenceError(
                    f"aligner loss became non-finite in epoch {epoch}", site="aligner.loss", trace=trace
                )
            optimizer.step(step.grads)
            losses.append(step.loss.loss)
            correct += step.correct
            count += step.count
        epochs_run = epoch + 1
        accuracy = masked_accuracy(model, eval_rows, vocab, make_rng(eval_seed), config.mask_prob)
        record = TraceRecord(
            phase="aligner",
            step=epoch,
            loss=float(np.mean(losses)) if losses else None,
            accuracy=accuracy,
        )
        trace.append(record)
        logger.info(
            f"Aligner epoch {epoch}: loss={record.loss} train_acc={correct / max(count, 1):.4f} "
            f"masked_acc={accuracy:.4f}"
        )
        if config.target_accuracy is not None and accuracy >= config.target_accuracy:
            logger.info(f"Aligner reached target accuracy {config.target_accuracy} after {epochs_run} epochs")
            break

    model.freeze()
    return AlignerTrainResult(model=model, trace=trace, epochs_run=epochs_run)


def encode_representations(model: AlignerModel, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Real representations: the means ``mu`` of a clean batch (no sampling)."""
    outputs = [aligner_forward(model, batch[start:start + chunk])[0] for start in range(0, batch.shape[0], chunk)]
    return np.concatenate(outputs, axis=0)


def word_representations(model: AlignerModel) -> Tuple[np.ndarray, np.ndarray]:
    """
    ``(mu, log sigma^2)`` of every word encoded on its own.

    Returns:
        Two ``(W, E_r)`` arrays in the order of ``model.word_ids``
    """
    ids = model.word_ids[:, None]
    mus, logvars = [], []
    for start in range(0, ids.shape[0], 512):
        mu, logvar = aligner_forward(model, ids[start:start + 512])
        mus.append(mu[:, 0])
        logvars.append(logvar[:, 0])
    return np.concatenate(mus, axis=0), np.concatenate(logvars, axis=0)


def variance_spread(model: AlignerModel) -> float:
    """Max minus min over words of the mean ``sigma^2``."""
    _, logvar = word_representations(model)
    per_word = np.exp(logvar).mean(axis=1)
    return float(per_word.max() - per_word.min())


def decode_consistency(model: AlignerModel) -> float:
    """Fraction of words that decode back to themselves from their own ``mu``."""
    mu, _ = word_representations(model)
    return float(np.mean(decode_words(model.f_lt, mu) == model.word_ids))


def balance_error_from_counts(counts: np.ndarray, n_interp: int) -> float:
    """Mean absolute deviation of decode counts from ``n_interp / 2``."""
    return float(np.mean(np.abs(np.asarray(counts, dtype=FLOAT) - n_interp / 2.0)))


def balance_error(model: AlignerModel, n_pairs: int, n_interp: int, rng: np.random.Generator) -> float:
    """
    Balance of word regions along straight lines between word means.

    For each random pair ``(a, b)`` of distinct words, ``n_interp`` points
    ``(1 - k/n) mu_a + (k/n) mu_b`` for ``k = 0..n-1`` are decoded and the
    number decoding to ``a`` is counted.

    Returns:
        Mean absolute deviation of the counts from ``n_interp / 2``
    """
    words = model.word_ids
    if words.shape[0] < 2:
        raise DataError("balance error needs at least two words")
    if n_pairs < 1 or n_interp < 1:
        raise DegenerateInputError("n_pairs and n_interp must be >= 1")
    mu, _ = word_representations(model)
    alphas = np.arange(n_interp, dtype=FLOAT) / n_interp
    counts = np.empty(n_pairs, dtype=FLOAT)
    for p in range(n_pairs):
        a = int(rng.integers(words.shape[0]))
        b = int(rng.integers(words.shape[0]))
        while b == a:
            b = int(rng.integers(words.shape[0]))
        points = (1.0 - alphas)[:, None] * mu[a] + alphas[:, None] * mu[b]
        counts[p] = np.sum(decode_words(model.f_lt, points) == words[a])
    return balance_error_from_counts(counts, n_interp)
