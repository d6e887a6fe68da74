"""
Dense Numerical Kernels.

This module holds the primitive operations every model in the package is
built from: affine maps, activations, layer normalization, softmax
cross-entropy and dropout masks, each with an exact analytic backward pass,
plus seeded random streams and a central finite-difference gradient oracle.

All arrays are ``float64``. Random streams use the counter-based Philox bit
generator so a seed reproduces the same stream on every platform; worker
streams are derived with ``SeedSequence.spawn``.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from ..utils.validation import (
    DegenerateInputError,
    NumericDivergenceError,
    ShapeMismatchError,
    check_probability,
)

logger = logging.getLogger(__name__)

DEFAULT_LN_EPSILON = 1e-5
FLOAT = np.float64


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """
    Create a reproducible random stream.

    Args:
        seed: Unsigned 64-bit seed

    Returns:
        Generator driven by Philox-4x64
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def spawn_rngs(seed: int, n: int) -> List[np.random.Generator]:
    """
    Derive ``n`` independent streams from one seed.

    Child ``k`` is always the same for a given ``(seed, k)``, so sweep cells
    and per-batch workers can be re-run in isolation.
    """
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.Philox(child)) for child in children]


def child_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from a stream."""
    return int(rng.integers(0, 2**63 - 1))


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {"__ndarray__": value.tolist(), "dtype": str(value.dtype)}
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        if "__ndarray__" in value:
            return np.array(value["__ndarray__"], dtype=value["dtype"])
        return {k: _from_jsonable(v) for k, v in value.items()}
    return value


def rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    """Serialize a generator state to JSON-compatible values."""
    return _to_jsonable(rng.bit_generator.state)


def restore_rng(state: Dict[str, Any]) -> np.random.Generator:
    """Rebuild a generator from :func:`rng_state` output."""
    bit_generator = np.random.Philox()
    bit_generator.state = _from_jsonable(state)
    return np.random.Generator(bit_generator)


# ---------------------------------------------------------------------------
# Layer normalization
# ---------------------------------------------------------------------------

@dataclass
class LayerNormParams:
    """Per-dimension gain and bias of a layer normalization site."""

    gain: np.ndarray
    bias: np.ndarray
    epsilon: float = DEFAULT_LN_EPSILON

    def __post_init__(self) -> None:
        if self.gain.shape != self.bias.shape or self.gain.ndim != 1:
            raise ShapeMismatchError(
                f"gain {self.gain.shape} and bias {self.bias.shape} must be equal-length vectors"
            )
        if self.epsilon < 0:
            raise DegenerateInputError(f"epsilon must be non-negative, got {self.epsilon}")

    @classmethod
    def identity(cls, dim: int, epsilon: float = DEFAULT_LN_EPSILON) -> "LayerNormParams":
        """Unit gain, zero bias."""
        return cls(gain=np.ones(dim, dtype=FLOAT), bias=np.zeros(dim, dtype=FLOAT), epsilon=epsilon)

    @property
    def dim(self) -> int:
        return int(self.gain.shape[0])


@dataclass
class LayerNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gain: np.ndarray


def layer_norm(x: np.ndarray, params: LayerNormParams) -> Tuple[np.ndarray, LayerNormCache]:
    """
    Normalize over the last axis, then apply gain and bias.

    Args:
        x: Input of shape ``(..., H)``
        params: Gain/bias of length ``H``

    Returns:
        Output of the same shape and the cache for :func:`layer_norm_backward`
    """
    if x.shape[-1] != params.dim:
        raise ShapeMismatchError(f"layer_norm input width {x.shape[-1]} != parameter width {params.dim}")
    if params.dim < 2:
        raise DegenerateInputError("layer_norm needs at least two normalized dimensions")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    denom = var + params.epsilon
    if params.epsilon == 0.0 and np.any(denom == 0.0):
        raise DegenerateInputError("constant input cannot be normalized with epsilon = 0")
    inv_std = 1.0 / np.sqrt(denom)
    x_hat = centered * inv_std
    y = x_hat * params.gain + params.bias
    return y, LayerNormCache(x_hat=x_hat, inv_std=inv_std, gain=params.gain)


def layer_norm_backward(
    cache: LayerNormCache, dy: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact gradient of :func:`layer_norm`, including the mean and deviation coupling.

    Returns:
        ``(dx, dgain, dbias)``; parameter gradients are summed over leading axes
    """
    if dy.shape != cache.x_hat.shape:
        raise ShapeMismatchError(f"layer_norm_backward got dy {dy.shape}, cache {cache.x_hat.shape}")
    width = dy.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    dbias = dy.sum(axis=lead) if lead else dy.copy()
    dgain = (dy * cache.x_hat).sum(axis=lead) if lead else dy * cache.x_hat
    d_hat = dy * cache.gain
    dx = cache.inv_std / width * (
        width * d_hat
        - d_hat.sum(axis=-1, keepdims=True)
        - cache.x_hat * (d_hat * cache.x_hat).sum(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def ln_gradient_factor_probe(
    hidden: int, sigma_target: float, trials: int, rng: np.random.Generator
) -> float:
    """
    Mean diagonal of the layer-norm input Jacobian at a given input deviation.

    Inputs are standard normal draws rescaled to an empirical deviation of
    exactly ``sigma_target``; the Jacobian diagonal is read off the analytic
    backward pass with unit upstream vectors. Unit gain and zero bias.

    Args:
        hidden: Normalized width ``H`` (at least 64)
        sigma_target: Empirical standard deviation of the probe inputs
        trials: Number of random inputs to average over
        rng: Random stream

    Returns:
        Trial-averaged mean of the Jacobian diagonal (close to ``1/sigma``)
    """
    if hidden < 64:
        raise DegenerateInputError(f"probe width must be >= 64, got {hidden}")
    if sigma_target <= 0:
        raise DegenerateInputError(f"sigma_target must be positive, got {sigma_target}")
    if trials < 1:
        raise DegenerateInputError(f"trials must be >= 1, got {trials}")

    params = LayerNormParams.identity(hidden)
    eye = np.eye(hidden, dtype=FLOAT)
    diagonals = []
    for _ in range(trials):
        raw = rng.standard_normal(hidden)
        raw = (raw - raw.mean()) / raw.std()
        x = raw * sigma_target
        _, cache = layer_norm(np.broadcast_to(x, (hidden, hidden)).copy(), params)
        dx, _, _ = layer_norm_backward(cache, eye)
        diagonals.append(float(np.mean(np.diag(dx))))
    return float(np.mean(diagonals))


# ---------------------------------------------------------------------------
# Affine map and activations
# ---------------------------------------------------------------------------

@dataclass
class AffineCache:
    x: np.ndarray
    W: np.ndarray


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, AffineCache]:
    """
    ``y = x W + b`` over the last axis of ``x``.

    Args:
        x: Input ``(..., In)``
        W: Weights ``(In, Out)``
        b: Bias ``(Out,)``
    """
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeMismatchError(f"affine shapes x{x.shape} W{W.shape} b{b.shape} do not agree")
    return x @ W + b, AffineCache(x=x, W=W)


def affine_backward(cache: AffineCache, dy: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(dx, dW, db)`` for :func:`affine`."""
    if dy.shape[:-1] != cache.x.shape[:-1] or dy.shape[-1] != cache.W.shape[1]:
        raise ShapeMismatchError(f"affine_backward dy {dy.shape} does not match x {cache.x.shape}")
    x2 = cache.x.reshape(-1, cache.x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ cache.W.T, x2.T @ dy2, dy2.sum(axis=0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through sigmoid given its output ``y``."""
    return dy * y * (1.0 - y)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through tanh given its output ``y``."""
    return dy * (1.0 - y * y)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation of the Gaussian error linear unit."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through :func:`gelu` given its input ``x``."""
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


@dataclass
class SoftmaxCECache:
    probs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray


def softmax_cross_entropy(
    logits: np.ndarray, targets: np.ndarray, weights: Optional[np.ndarray] = None
) -> Tuple[float, SoftmaxCECache]:
    """
    Row-wise softmax cross-entropy, averaged over rows.

    Args:
        logits: ``(N, V)`` unnormalized scores
        targets: ``(N,)`` integer class ids
        weights: Optional per-row weights; the loss is their weighted mean

    Returns:
        Scalar loss and cache
    """
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatchError(f"logits {logits.shape} and targets {targets.shape} do not agree")
    n_classes = logits.shape[1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError(f"target ids must lie in [0, {n_classes})")
    if weights is None:
        weights = np.full(logits.shape[0], 1.0 / max(logits.shape[0], 1), dtype=FLOAT)
    else:
        weights = np.asarray(weights, dtype=FLOAT) / np.sum(weights)
    log_z = logsumexp(logits, axis=1)
    rows = np.arange(logits.shape[0])
    nll = log_z - logits[rows, targets]
    probs = np.exp(logits - log_z[:, None])
    return float(np.sum(weights * nll)), SoftmaxCECache(probs=probs, targets=targets, weights=weights)


def softmax_cross_entropy_backward(cache: SoftmaxCECache, dloss: float = 1.0) -> np.ndarray:
    """Gradient of :func:`softmax_cross_entropy` with respect to the logits."""
    grad = cache.probs.copy()
    grad[np.arange(grad.shape[0]), cache.targets] -= 1.0
    return grad * (cache.weights[:, None] * dloss)


# ---------------------------------------------------------------------------
# Dropout masks
# ---------------------------------------------------------------------------

def dropout_mask(shape: Any, rho: float, rng: np.random.Generator) -> np.ndarray:
    """
    Sub-model selection mask: each entry is 0 with probability ``rho``.

    No ``1/(1 - rho)`` rescaling is applied, so the mask behaves identically
    in training and inference.

    Args:
        shape: Mask shape (an int or a tuple)
        rho: Drop probability in [0, 1)
        rng: Random stream
    """
    check_probability(rho, "rho")
    if rho == 0.0:
        return np.ones(shape, dtype=FLOAT)
    return (rng.random(shape) >= rho).astype(FLOAT)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    step: float = 1e-6,
    floor: float = 1e-8,
    relative_floor: float = 1e-4,
) -> float:
    """
    Compare an analytic gradient against central differences.

    ``x`` is perturbed in place one entry at a time and restored afterwards,
    so ``f`` may close over arrays that alias ``x`` (model parameters).

    Args:
        f: Scalar function of ``x``
        x: Evaluation point
        analytic_grad: Gradient to verify, same shape as ``x``
        step: Central-difference half step
        floor: Absolute lower bound on the error denominator
        relative_floor: Denominator floor as a fraction of the largest numeric gradient

    Returns:
        Maximum over entries of ``|analytic - numeric| / max(|numeric|, floor')``
    """
    if analytic_grad.shape != x.shape:
        raise ShapeMismatchError(f"gradient {analytic_grad.shape} does not match x {x.shape}")
    if not x.flags.c_contiguous:
        raise ValueError("finite_difference_check perturbs x in place and needs a contiguous array")
    numeric = np.zeros_like(x, dtype=FLOAT)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        f_plus = f(x)
        flat[i] = original - step
        f_minus = f(x)
        flat[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericDivergenceError("finite_difference_check: non-finite function value", site="fd")
        num_flat[i] = (f_plus - f_minus) / (2.0 * step)
    denom_floor = max(floor, relative_floor * float(np.max(np.abs(numeric), initial=0.0)))
    denom = np.maximum(np.abs(numeric), denom_floor)
    return float(np.max(np.abs(analytic_grad - numeric) / denom, initial=0.0))
