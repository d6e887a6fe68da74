"""
Self-Attention Encoder.

Post-norm Transformer encoder blocks (multi-head self-attention and a GELU
feed-forward sub-layer, each followed by residual addition and layer
normalization) with exact backward passes. Padding positions are excluded
as attention keys. Training-time dropout here is ordinary inverted dropout;
it is unrelated to the generator's dropout sampling.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import softmax

from ..utils.validation import DegenerateInputError, ShapeMismatchError, check_finite
from .numerics import (
    FLOAT,
    LayerNormCache,
    LayerNormParams,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
)

MASK_VALUE = -1e9


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


@dataclass
class EncoderBlock:
    """Weights of one encoder block."""

    W_q: np.ndarray
    b_q: np.ndarray
    W_k: np.ndarray
    b_k: np.ndarray
    W_v: np.ndarray
    b_v: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray
    ln_attn: LayerNormParams
    W_1: np.ndarray
    b_1: np.ndarray
    W_2: np.ndarray
    b_2: np.ndarray
    ln_ff: LayerNormParams

    @classmethod
    def init(cls, width: int, ff_width: int, rng: np.random.Generator) -> "EncoderBlock":
        zeros = lambda n: np.zeros(n, dtype=FLOAT)  # noqa: E731
        return cls(
            W_q=_glorot(rng, width, width), b_q=zeros(width),
            W_k=_glorot(rng, width, width), b_k=zeros(width),
            W_v=_glorot(rng, width, width), b_v=zeros(width),
            W_o=_glorot(rng, width, width), b_o=zeros(width),
            ln_attn=LayerNormParams.identity(width),
            W_1=_glorot(rng, width, ff_width), b_1=zeros(ff_width),
            W_2=_glorot(rng, ff_width, width), b_2=zeros(width),
            ln_ff=LayerNormParams.identity(width),
        )

    def named_parameters(self):
        for name in ("W_q", "b_q", "W_k", "b_k", "W_v", "b_v", "W_o", "b_o"):
            yield name, getattr(self, name)
        yield "ln_attn.gain", self.ln_attn.gain
        yield "ln_attn.bias", self.ln_attn.bias
        for name in ("W_1", "b_1", "W_2", "b_2"):
            yield name, getattr(self, name)
        yield "ln_ff.gain", self.ln_ff.gain
        yield "ln_ff.bias", self.ln_ff.bias


@dataclass
class BlockCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    attn_merged: np.ndarray
    mask_attn: Optional[np.ndarray]
    ln_attn: LayerNormCache
    y1: np.ndarray
    u: np.ndarray
    gu: np.ndarray
    mask_ff: Optional[np.ndarray]
    ln_ff: LayerNormCache


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    batch, steps, width = x.shape
    return x.reshape(batch, steps, heads, width // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    batch, heads, steps, size = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, steps, heads * size)


def _inverted_dropout(shape, rate: float, rng: Optional[np.random.Generator]) -> Optional[np.ndarray]:
    if rate <= 0.0 or rng is None:
        return None
    return (rng.random(shape) >= rate).astype(FLOAT) / (1.0 - rate)


def block_forward(
    block: EncoderBlock,
    x: np.ndarray,
    key_mask: np.ndarray,
    heads: int,
    dropout: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, BlockCache]:
    """
    One encoder block.

    Args:
        block: Block weights
        x: ``(B, T, E)`` inputs
        key_mask: ``(B, T)`` True where the position may be attended to
        heads: Number of attention heads (must divide ``E``)
        dropout: Inverted-dropout rate on both sub-layer outputs
        rng: Stream for dropout; ``None`` disables dropout
    """
    width = x.shape[-1]
    if width % heads:
        raise DegenerateInputError(f"{heads} heads do not divide width {width}")
    size = width // heads
    q = _split_heads(x @ block.W_q + block.b_q, heads)
    k = _split_heads(x @ block.W_k + block.b_k, heads)
    v = _split_heads(x @ block.W_v + block.b_v, heads)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(size)
    scores = np.where(key_mask[:, None, None, :], scores, MASK_VALUE)
    probs = softmax(scores, axis=-1)
    attn_merged = _merge_heads(probs @ v)
    attn = attn_merged @ block.W_o + block.b_o
    mask_attn = _inverted_dropout(attn.shape, dropout, rng)
    if mask_attn is not None:
        attn = attn * mask_attn
    y1, ln_attn_cache = layer_norm(x + attn, block.ln_attn)

    u = y1 @ block.W_1 + block.b_1
    gu = gelu(u)
    ff = gu @ block.W_2 + block.b_2
    mask_ff = _inverted_dropout(ff.shape, dropout, rng)
    if mask_ff is not None:
        ff = ff * mask_ff
    y2, ln_ff_cache = layer_norm(y1 + ff, block.ln_ff)
    check_finite(y2, "encoder.block")
    cache = BlockCache(
        x=x, q=q, k=k, v=v, probs=probs, attn_merged=attn_merged, mask_attn=mask_attn,
        ln_attn=ln_attn_cache, y1=y1, u=u, gu=gu, mask_ff=mask_ff, ln_ff=ln_ff_cache,
    )
    return y2, cache


def _param_grads(x: np.ndarray, dy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return x2.T @ dy2, dy2.sum(axis=0)


def block_backward(
    block: EncoderBlock, cache: BlockCache, dy: np.ndarray, heads: int
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Exact gradients of :func:`block_forward`."""
    grads: Dict[str, np.ndarray] = {}
    dz2, grads["ln_ff.gain"], grads["ln_ff.bias"] = layer_norm_backward(cache.ln_ff, dy)
    d_ff = dz2 if cache.mask_ff is None else dz2 * cache.mask_ff
    grads["W_2"], grads["b_2"] = _param_grads(cache.gu, d_ff)
    du = gelu_backward(cache.u, d_ff @ block.W_2.T)
    grads["W_1"], grads["b_1"] = _param_grads(cache.y1, du)
    dy1 = dz2 + du @ block.W_1.T

    dz1, grads["ln_attn.gain"], grads["ln_attn.bias"] = layer_norm_backward(cache.ln_attn, dy1)
    d_attn = dz1 if cache.mask_attn is None else dz1 * cache.mask_attn
    grads["W_o"], grads["b_o"] = _param_grads(cache.attn_merged, d_attn)
    d_ctx = _split_heads(d_attn @ block.W_o.T, heads)

    size = cache.q.shape[-1]
    d_probs = d_ctx @ cache.v.transpose(0, 1, 3, 2)
    dv = cache.probs.transpose(0, 1, 3, 2) @ d_ctx
    d_scores = cache.probs * (d_probs - np.sum(d_probs * cache.probs, axis=-1, keepdims=True))
    dq = d_scores @ cache.k / np.sqrt(size)
    dk = d_scores.transpose(0, 1, 3, 2) @ cache.q / np.sqrt(size)

    dx = dz1
    for name, d_proj in (("q", dq), ("k", dk), ("v", dv)):
        merged = _merge_heads(d_proj)
        grads[f"W_{name}"], grads[f"b_{name}"] = _param_grads(cache.x, merged)
        dx = dx + merged @ getattr(block, f"W_{name}").T
    return dx, grads


@dataclass
class EncoderCache:
    ids: np.ndarray
    embed_mask: Optional[np.ndarray]
    blocks: List[BlockCache]


class TransformerEncoder:
    """Token and learned positional embeddings followed by encoder blocks."""

    def __init__(
        self,
        vocab_size: int,
        width: int,
        ff_width: int,
        layers: int,
        heads: int,
        max_len: int,
        rng: np.random.Generator,
    ):
        """
        Initialize encoder weights.

        Args:
            vocab_size: Number of token ids
            width: Embedding and model width ``E``
            ff_width: Feed-forward inner width
            layers: Number of blocks
            heads: Attention heads per block
            max_len: Longest supported sequence
            rng: Random stream for initialization
        """
        if width % heads:
            raise DegenerateInputError(f"{heads} heads do not divide width {width}")
        self.heads = heads
        self.max_len = max_len
        self.token_embedding = rng.normal(0.0, 1.0 / np.sqrt(width), (vocab_size, width))
        self.position_embedding = rng.normal(0.0, 0.02, (max_len, width))
        self.blocks = [EncoderBlock.init(width, ff_width, rng) for _ in range(layers)]

    def named_parameters(self):
        yield "token_embedding", self.token_embedding
        yield "position_embedding", self.position_embedding
        for index, block in enumerate(self.blocks):
            for name, array in block.named_parameters():
                yield f"blocks.{index}.{name}", array

    def forward(
        self,
        ids: np.ndarray,
        key_mask: np.ndarray,
        dropout: float = 0.0,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[np.ndarray, EncoderCache]:
        """
        Encode a ``(B, T)`` id matrix into ``(B, T, E)`` features.

        Args:
            ids: Token ids
            key_mask: True at non-padding positions
            dropout: Inverted-dropout rate (training only)
            rng: Dropout stream; ``None`` runs deterministically
        """
        if ids.ndim != 2:
            raise ShapeMismatchError(f"ids must be (B, T), got {ids.shape}")
        steps = ids.shape[1]
        if steps > self.max_len:
            raise ShapeMismatchError(f"sequence length {steps} exceeds encoder maximum {self.max_len}")
        x = self.token_embedding[ids] + self.position_embedding[:steps]
        embed_mask = _inverted_dropout(x.shape, dropout, rng)
        if embed_mask is not None:
            x = x * embed_mask
        caches = []
        for block in self.blocks:
            x, cache = block_forward(block, x, key_mask, self.heads, dropout, rng)
            caches.append(cache)
        return x, EncoderCache(ids=ids, embed_mask=embed_mask, blocks=caches)

    def backward(self, cache: EncoderCache, dy: np.ndarray) -> Dict[str, np.ndarray]:
        """Named parameter gradients given ``dL/d(features)``."""
        grads: Dict[str, np.ndarray] = {}
        for index in range(len(self.blocks) - 1, -1, -1):
            dy, block_grads = block_backward(self.blocks[index], cache.blocks[index], dy, self.heads)
            for name, grad in block_grads.items():
                grads[f"blocks.{index}.{name}"] = grad
        if cache.embed_mask is not None:
            dy = dy * cache.embed_mask
        d_token = np.zeros_like(self.token_embedding)
        np.add.at(d_token, cache.ids, dy)
        d_position = np.zeros_like(self.position_embedding)
        d_position[: dy.shape[1]] = dy.sum(axis=0)
        grads["token_embedding"] = d_token
        grads["position_embedding"] = d_position
        return grads
