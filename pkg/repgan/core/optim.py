"""
Optimizers.

Adaptive-moment optimizer with optional decoupled weight decay, operating
in place on named parameter arrays, plus global-norm helpers.
"""

import logging
from typing import Dict, Mapping, Tuple

import numpy as np

from ..utils.validation import FrozenParameterError

logger = logging.getLogger(__name__)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    """L2 norm over all gradient arrays."""
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """
    Rescale gradients in place so their global norm is at most ``max_norm``.

    Returns:
        The norm before clipping
    """
    norm = global_norm(grads)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


class Adam:
    """Adam, or AdamW when ``weight_decay`` is positive (decay decoupled from the moments)."""

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        """
        Initialize optimizer state.

        Args:
            params: Named parameter arrays, updated in place by :meth:`step`
            lr: Learning rate
            betas: Moment decay rates
            eps: Denominator guard
            weight_decay: Decoupled decay coefficient (0 for plain Adam)
        """
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(p) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p) for name, p in self.params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        """Apply one update; parameters without a gradient entry are left untouched."""
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            if not p.flags.writeable:
                raise FrozenParameterError(f"parameter '{name}' is frozen", field=name)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            if self.weight_decay > 0.0:
                p *= 1.0 - self.lr * self.weight_decay
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
