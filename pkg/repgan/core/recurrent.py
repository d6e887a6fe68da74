"""
Recurrent Models.

Vanilla, LayerNorm and fully normalized LSTM cells, multi-layer stacks
threaded over time, exact backward passes and gradient-norm probes.

Gate blocks are laid out as ``(f, i, o, c_hat)`` along the ``4H`` axis.
The LayerNorm variant normalizes both input projections and the cell
state; the fully normalized variant additionally normalizes the hidden
state ``h_t = LN(sigmoid(o_t) * tanh(c_t))``. The bias ``b`` is added
outside the normalized projections.
"""

import logging
from dataclasses import dataclass, field
from itertools import islice
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..models.training import LstmVariant
from ..utils.validation import DegenerateInputError, NumericDivergenceError, ShapeMismatchError, check_finite
from .numerics import (
    FLOAT,
    LayerNormCache,
    LayerNormParams,
    layer_norm,
    layer_norm_backward,
    sigmoid,
    sigmoid_backward,
    tanh_backward,
)

logger = logging.getLogger(__name__)

FORGET_BIAS = 1.0
LN_SITES = ("ln_h", "ln_x", "ln_c", "ln_out")


def _active_sites(variant: LstmVariant) -> Tuple[str, ...]:
    if variant == LstmVariant.VANILLA:
        return ()
    if variant == LstmVariant.LAYER_NORM:
        return ("ln_h", "ln_x", "ln_c")
    return LN_SITES


@dataclass
class LstmCellParams:
    """Weights of one LSTM layer; LN sites not used by the variant are ``None``."""

    W_h: np.ndarray
    W_x: np.ndarray
    b: np.ndarray
    ln_h: Optional[LayerNormParams] = None
    ln_x: Optional[LayerNormParams] = None
    ln_c: Optional[LayerNormParams] = None
    ln_out: Optional[LayerNormParams] = None

    def __post_init__(self) -> None:
        hidden = self.W_h.shape[0]
        if self.W_h.shape != (hidden, 4 * hidden):
            raise ShapeMismatchError(f"W_h must be (H, 4H), got {self.W_h.shape}")
        if self.W_x.ndim != 2 or self.W_x.shape[1] != 4 * hidden:
            raise ShapeMismatchError(f"W_x must be (X, 4H), got {self.W_x.shape}")
        if self.b.shape != (4 * hidden,):
            raise ShapeMismatchError(f"b must be (4H,), got {self.b.shape}")

    @property
    def hidden_dim(self) -> int:
        return int(self.W_h.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.W_x.shape[0])

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, variant: LstmVariant, rng: np.random.Generator) -> "LstmCellParams":
        """
        Glorot-uniform weights, forget-gate bias +1, unit-gain LN sites.

        Args:
            input_dim: Input width ``X``
            hidden_dim: Hidden width ``H``
            variant: Cell architecture
            rng: Random stream
        """
        limit_h = np.sqrt(6.0 / (hidden_dim + 4 * hidden_dim))
        limit_x = np.sqrt(6.0 / (input_dim + 4 * hidden_dim))
        W_h = rng.uniform(-limit_h, limit_h, (hidden_dim, 4 * hidden_dim))
        W_x = rng.uniform(-limit_x, limit_x, (input_dim, 4 * hidden_dim))
        b = np.zeros(4 * hidden_dim, dtype=FLOAT)
        b[:hidden_dim] = FORGET_BIAS
        return cls.with_weights(W_h, W_x, b, variant)

    @classmethod
    def with_weights(cls, W_h: np.ndarray, W_x: np.ndarray, b: np.ndarray, variant: LstmVariant) -> "LstmCellParams":
        """Attach identity LN sites appropriate to ``variant`` to given weights."""
        hidden = W_h.shape[0]
        widths = {"ln_h": 4 * hidden, "ln_x": 4 * hidden, "ln_c": hidden, "ln_out": hidden}
        sites = {name: LayerNormParams.identity(widths[name]) for name in _active_sites(variant)}
        return cls(W_h=np.asarray(W_h, dtype=FLOAT), W_x=np.asarray(W_x, dtype=FLOAT), b=np.asarray(b, dtype=FLOAT), **sites)

    def named_parameters(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Yield ``(name, array)`` in checkpoint order."""
        yield "W_h", self.W_h
        yield "W_x", self.W_x
        yield "b", self.b
        for site in LN_SITES:
            params = getattr(self, site)
            if params is not None:
                yield f"{site}.gain", params.gain
                yield f"{site}.bias", params.bias


@dataclass
class LstmState:
    """Hidden and cell state, each ``(B, H)``."""

    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LstmState":
        return cls(h=np.zeros((batch, hidden), dtype=FLOAT), c=np.zeros((batch, hidden), dtype=FLOAT))


@dataclass
class CellCache:
    variant: LstmVariant
    params: LstmCellParams
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    g: np.ndarray
    tanh_c: np.ndarray
    ln_caches: Dict[str, LayerNormCache] = field(default_factory=dict)


def cell_forward(
    variant: LstmVariant, params: LstmCellParams, x_t: np.ndarray, state: LstmState
) -> Tuple[LstmState, CellCache]:
    """
    One LSTM step.

    Args:
        variant: Cell architecture
        params: Layer weights
        x_t: Input ``(B, X)``
        state: Previous ``(h, c)``

    Returns:
        New state and the cache for :func:`cell_backward`
    """
    if x_t.ndim != 2 or x_t.shape[1] != params.input_dim:
        raise ShapeMismatchError(f"cell input {x_t.shape} does not match input width {params.input_dim}")
    hidden = params.hidden_dim
    if state.h.shape != (x_t.shape[0], hidden) or state.c.shape != state.h.shape:
        raise ShapeMismatchError(f"state shapes {state.h.shape}/{state.c.shape} do not match batch x {hidden}")

    ln_caches: Dict[str, LayerNormCache] = {}
    proj_h = state.h @ params.W_h
    proj_x = x_t @ params.W_x
    if variant == LstmVariant.VANILLA:
        a = proj_h + proj_x + params.b
    else:
        norm_h, ln_caches["ln_h"] = layer_norm(proj_h, params.ln_h)
        norm_x, ln_caches["ln_x"] = layer_norm(proj_x, params.ln_x)
        a = norm_h + norm_x + params.b
    check_finite(a, "lstm.gates")

    f = sigmoid(a[:, :hidden])
    i = sigmoid(a[:, hidden:2 * hidden])
    o = sigmoid(a[:, 2 * hidden:3 * hidden])
    g = np.tanh(a[:, 3 * hidden:])

    c = f * state.c + i * g
    if variant != LstmVariant.VANILLA:
        c, ln_caches["ln_c"] = layer_norm(c, params.ln_c)
    check_finite(c, "lstm.cell_state")

    tanh_c = np.tanh(c)
    h = o * tanh_c
    if variant == LstmVariant.FULLY_NORMALIZED:
        h, ln_caches["ln_out"] = layer_norm(h, params.ln_out)
    check_finite(h, "lstm.hidden_state")

    cache = CellCache(
        variant=variant, params=params, x=x_t, h_prev=state.h, c_prev=state.c,
        f=f, i=i, o=o, g=g, tanh_c=tanh_c, ln_caches=ln_caches,
    )
    return LstmState(h=h, c=c), cache


def cell_backward(
    cache: CellCache, dh: np.ndarray, dc: np.ndarray
) -> Tuple[np.ndarray, LstmState, Dict[str, np.ndarray]]:
    """
    Exact gradients of one LSTM step.

    Args:
        cache: Cache from the matching :func:`cell_forward`
        dh: Gradient with respect to the new hidden state
        dc: Gradient with respect to the new cell state (from the next step)

    Returns:
        ``(dx_t, d_state_prev, d_params)`` with parameter names as in
        :meth:`LstmCellParams.named_parameters`
    """
    if dh.shape != cache.h_prev.shape or dc.shape != cache.c_prev.shape:
        raise ShapeMismatchError(f"cell_backward gradients {dh.shape}/{dc.shape} do not match {cache.h_prev.shape}")
    params = cache.params
    grads: Dict[str, np.ndarray] = {}

    if cache.variant == LstmVariant.FULLY_NORMALIZED:
        dh, grads["ln_out.gain"], grads["ln_out.bias"] = layer_norm_backward(cache.ln_caches["ln_out"], dh)

    d_o = dh * cache.tanh_c
    dc_total = dc + tanh_backward(cache.tanh_c, dh * cache.o)
    if cache.variant != LstmVariant.VANILLA:
        dc_total, grads["ln_c.gain"], grads["ln_c.bias"] = layer_norm_backward(cache.ln_caches["ln_c"], dc_total)

    dc_prev = dc_total * cache.f
    da = np.concatenate(
        [
            sigmoid_backward(cache.f, dc_total * cache.c_prev),
            sigmoid_backward(cache.i, dc_total * cache.g),
            sigmoid_backward(cache.o, d_o),
            tanh_backward(cache.g, dc_total * cache.i),
        ],
        axis=1,
    )
    grads["b"] = da.sum(axis=0)
    if cache.variant == LstmVariant.VANILLA:
        d_proj_h = d_proj_x = da
    else:
        d_proj_h, grads["ln_h.gain"], grads["ln_h.bias"] = layer_norm_backward(cache.ln_caches["ln_h"], da)
        d_proj_x, grads["ln_x.gain"], grads["ln_x.bias"] = layer_norm_backward(cache.ln_caches["ln_x"], da)

    grads["W_h"] = cache.h_prev.T @ d_proj_h
    grads["W_x"] = cache.x.T @ d_proj_x
    dh_prev = d_proj_h @ params.W_h.T
    dx = d_proj_x @ params.W_x.T
    return dx, LstmState(h=dh_prev, c=dc_prev), grads


def hidden_cell_jacobian(
    variant: LstmVariant, params: LstmCellParams, x_t: np.ndarray, state: LstmState
) -> np.ndarray:
    """
    Dense ``dh_t / dc_{t-1}`` for a single example.

    Args:
        variant: Cell architecture
        params: Layer weights
        x_t: Input ``(X,)``
        state: Previous state with ``h``/``c`` of shape ``(H,)``

    Returns:
        ``(H, H)`` Jacobian, row ``k`` is the gradient of ``h_t[k]``
    """
    hidden = params.hidden_dim
    batch_x = np.broadcast_to(x_t, (hidden, x_t.shape[-1])).copy()
    batch_state = LstmState(
        h=np.broadcast_to(state.h, (hidden, hidden)).copy(),
        c=np.broadcast_to(state.c, (hidden, hidden)).copy(),
    )
    _, cache = cell_forward(variant, params, batch_x, batch_state)
    _, d_state, _ = cell_backward(cache, np.eye(hidden, dtype=FLOAT), np.zeros((hidden, hidden), dtype=FLOAT))
    return d_state.c


@dataclass
class LstmStack:
    """Multi-layer LSTM of a single variant."""

    variant: LstmVariant
    layers: List[LstmCellParams]

    def __post_init__(self) -> None:
        if not self.layers:
            raise DegenerateInputError("an LSTM stack needs at least one layer")
        for index in range(1, len(self.layers)):
            if self.layers[index].input_dim != self.layers[index - 1].hidden_dim:
                raise ShapeMismatchError(
                    f"layer {index} input width {self.layers[index].input_dim} != "
                    f"layer {index - 1} hidden width {self.layers[index - 1].hidden_dim}"
                )

    @classmethod
    def init(
        cls, input_dim: int, hidden_dim: int, depth: int, variant: LstmVariant, rng: np.random.Generator
    ) -> "LstmStack":
        """Build ``depth`` freshly initialized layers."""
        layers = []
        width = input_dim
        for _ in range(depth):
            layers.append(LstmCellParams.init(width, hidden_dim, variant, rng))
            width = hidden_dim
        return cls(variant=variant, layers=layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def hidden_dim(self) -> int:
        return self.layers[-1].hidden_dim

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for index, layer in enumerate(self.layers):
            for name, array in layer.named_parameters():
                yield f"{prefix}layers.{index}.{name}", array

    def initial_states(self, batch: int) -> List[LstmState]:
        return [LstmState.zeros(batch, layer.hidden_dim) for layer in self.layers]


@dataclass
class StackCache:
    """Per-timestep, per-layer cell caches."""

    steps: List[List[CellCache]] = field(default_factory=list)


def stack_step(
    stack: LstmStack, x_t: np.ndarray, states: Sequence[LstmState]
) -> Tuple[List[LstmState], List[CellCache]]:
    """Advance every layer by one timestep."""
    new_states: List[LstmState] = []
    caches: List[CellCache] = []
    inp = x_t
    for layer, state in zip(stack.layers, states):
        new_state, cache = cell_forward(stack.variant, layer, inp, state)
        new_states.append(new_state)
        caches.append(cache)
        inp = new_state.h
    return new_states, caches


def stack_forward(
    stack: LstmStack, inputs: np.ndarray, initial: Optional[Sequence[LstmState]] = None
) -> Tuple[List[np.ndarray], StackCache]:
    """
    Run the stack over a sequence.

    Args:
        stack: LSTM stack
        inputs: ``(T, B, X)`` time-major inputs
        initial: Optional initial state per layer (zeros by default)

    Returns:
        Hidden sequences ``(T, B, H)`` per layer and the cache
    """
    if inputs.ndim != 3 or inputs.shape[0] == 0:
        raise DegenerateInputError("stack_forward needs a non-empty (T, B, X) sequence")
    steps, batch = inputs.shape[0], inputs.shape[1]
    states = list(initial) if initial is not None else stack.initial_states(batch)
    outputs = [np.empty((steps, batch, layer.hidden_dim), dtype=FLOAT) for layer in stack.layers]
    cache = StackCache()
    for t in range(steps):
        states, caches = stack_step(stack, inputs[t], states)
        cache.steps.append(caches)
        for index, state in enumerate(states):
            outputs[index][t] = state.h
    return outputs, cache


def stack_backward(
    stack: LstmStack, cache: StackCache, d_top: np.ndarray
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Backpropagation through time for the whole stack.

    Args:
        stack: LSTM stack used in the forward pass
        cache: Cache from :func:`stack_forward` (or assembled from :func:`stack_step`)
        d_top: ``(T, B, H)`` gradient with respect to the top layer outputs

    Returns:
        Gradient with respect to the inputs ``(T, B, X)`` and named parameter gradients
    """
    steps = len(cache.steps)
    if d_top.shape[0] != steps:
        raise ShapeMismatchError(f"d_top has {d_top.shape[0]} steps, cache has {steps}")
    batch = d_top.shape[1]
    grads = {name: np.zeros_like(array) for name, array in stack.named_parameters()}
    dh_next = [np.zeros((batch, layer.hidden_dim), dtype=FLOAT) for layer in stack.layers]
    dc_next = [np.zeros((batch, layer.hidden_dim), dtype=FLOAT) for layer in stack.layers]
    d_inputs = np.zeros((steps, batch, stack.input_dim), dtype=FLOAT)

    for t in range(steps - 1, -1, -1):
        d_from_above = d_top[t]
        for index in range(stack.depth - 1, -1, -1):
            dx, d_state, layer_grads = cell_backward(
                cache.steps[t][index], d_from_above + dh_next[index], dc_next[index]
            )
            dh_next[index] = d_state.h
            dc_next[index] = d_state.c
            for name, grad in layer_grads.items():
                grads[f"layers.{index}.{name}"] += grad
            d_from_above = dx
        d_inputs[t] = d_from_above
    return d_inputs, grads


LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def projection_loss(hidden: int, rng: np.random.Generator) -> LossFn:
    """
    Fixed random linear read-out: mean over ``(t, b)`` of ``h_t . u``.

    Returns:
        Function mapping top outputs ``(T, B, H)`` to ``(loss, d_top)``
    """
    u = rng.standard_normal(hidden)
    u /= np.linalg.norm(u)

    def loss_fn(top: np.ndarray) -> Tuple[float, np.ndarray]:
        count = top.shape[0] * top.shape[1]
        return float(np.sum(top @ u) / count), np.broadcast_to(u / count, top.shape).copy()

    return loss_fn


def grad_norm_probe(
    stack: LstmStack, loss_fn: LossFn, batches: Iterable[np.ndarray], n_batches: int
) -> List[float]:
    """
    Frobenius norms of the last layer's input-projection gradient, per batch.

    No parameters are updated.

    Args:
        stack: LSTM stack to probe
        loss_fn: Maps top outputs to ``(loss, d_top)``
        batches: ``(T, B, X)`` input batches
        n_batches: Number of batches to probe

    Returns:
        One norm per probed batch
    """
    if n_batches < 1:
        raise DegenerateInputError("n_batches must be >= 1")
    key = f"layers.{stack.depth - 1}.W_x"
    norms: List[float] = []
    for batch in islice(batches, n_batches):
        outputs, cache = stack_forward(stack, batch)
        loss, d_top = loss_fn(outputs[-1])
        if not np.isfinite(loss):
            raise NumericDivergenceError("grad_norm_probe: non-finite loss", site="grad_norm_probe")
        _, grads = stack_backward(stack, cache, d_top)
        norms.append(float(np.linalg.norm(grads[key])))
    logger.debug(f"Probed {len(norms)} batches for {stack.variant.value}: mean norm {np.mean(norms):.4g}")
    return norms
