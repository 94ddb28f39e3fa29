"""Multi-head attention with self- and cross-attention specializations.

Per head h: queries, keys and values are projected by dense layers, the
scaled key/query comparison softmax mixes the projected values, and the
head outputs are concatenated and projected back to model width. Weights
are stored as one matrix per head, which keeps each head's computation
directly inspectable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MASKED_LOGIT = -1e30


class MaskError(ValueError):
    """Raised when an attention mask disallows every key for some query."""


@dataclass
class MhaWeights:
    """Per-head projections plus the shared output projection.

    w_q, w_k, w_v: lists of [d, d_head] matrices, one per head.
    w_o: [n_heads * d_head, d].
    """

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor

    def __post_init__(self):
        n = self.n_heads
        if not (len(self.w_k) == len(self.w_v) == n):
            raise ShapeError("MhaWeights: per-head lists have different lengths")
        d, dk = self.w_q[0].shape
        for w in (*self.w_q, *self.w_k, *self.w_v):
            if w.shape != (d, dk):
                raise ShapeError(f"MhaWeights: head matrix {w.shape}, expected {(d, dk)}")
        if self.w_o.shape != (n * dk, d):
            raise ShapeError(f"MhaWeights: w_o {self.w_o.shape}, "
                             f"expected {(n * dk, d)}")

    @property
    def n_heads(self) -> int:
        return len(self.w_q)

    @property
    def d_model(self) -> int:
        return self.w_q[0].shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q[0].shape[1]


def init_mha(d: int, n_heads: int, rng: np.random.Generator) -> MhaWeights:
    """Glorot-uniform head and output projections; d must split evenly
    across heads (d_head = d / n_heads)."""
    if d % n_heads != 0:
        raise ShapeError(f"model width {d} not divisible by {n_heads} heads")
    dk = d // n_heads

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)),
                      requires_grad=True)

    w_q = [glorot(d, dk) for _ in range(n_heads)]
    w_k = [glorot(d, dk) for _ in range(n_heads)]
    w_v = [glorot(d, dk) for _ in range(n_heads)]
    w_o = glorot(n_heads * dk, d)
    return MhaWeights(w_q, w_k, w_v, w_o)


def _validate_mask(mask: np.ndarray, n_q: int, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n_q, n):
        raise ShapeError(f"mask shape {mask.shape}, expected {(n_q, n)}")
    if mask.all(axis=-1).any():
        raise MaskError("mask disallows every key for at least one query row")
    return mask


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor,
                         w: MhaWeights,
                         mask: Optional[np.ndarray] = None,
                         dropout_rate: float = 0.0,
                         training: bool = False,
                         rng: Optional[np.random.Generator] = None) -> Tensor:
    """query: [..., n_q, d]; key/value: [..., n, d] with equal first extent.

    mask, when given, is a boolean [n_q, n] matrix marking disallowed key
    positions; those logits receive a large negative additive constant
    before the softmax. dropout_rate applies to the attention probabilities
    and defaults to 0 (the reference model never uses it).
    """
    d = w.d_model
    for name, t in (("query", query), ("key", key), ("value", value)):
        if t.ndim < 2 or t.shape[-1] != d:
            raise ShapeError(f"{name} shape {t.shape}: last extent must be {d}")
    if key.shape[-2] != value.shape[-2]:
        raise ShapeError(f"key {key.shape} and value {value.shape} "
                         f"disagree on sequence length")
    n_q, n = query.shape[-2], key.shape[-2]
    additive = None
    if mask is not None:
        mask = _validate_mask(mask, n_q, n)
        additive = Tensor(np.where(mask, MASKED_LOGIT, 0.0))

    inv_sqrt_dk = 1.0 / np.sqrt(w.d_head)
    # heads are stored as separate matrices but projected in one fused
    # matmul per Q/K/V, then handled as a batch axis
    q_h = _split_heads(T.matmul(query, T.concat(w.w_q, axis=1)), w.n_heads)
    k_h = _split_heads(T.matmul(key, T.concat(w.w_k, axis=1)), w.n_heads)
    v_h = _split_heads(T.matmul(value, T.concat(w.w_v, axis=1)), w.n_heads)
    logits = T.scale(T.matmul(q_h, T.transpose_last2(k_h)), inv_sqrt_dk)
    if additive is not None:
        logits = T.add(logits, additive)
    probs = T.softmax_lastdim(logits)
    if dropout_rate > 0.0:
        probs = T.dropout(probs, dropout_rate, training, rng)
    merged = _merge_heads(T.matmul(probs, v_h))
    return T.matmul(merged, w.w_o)


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    """[..., n, n_heads*d_head] -> [..., n_heads, n, d_head]"""
    *batch, n, hd = t.shape
    return T.swap_axes(T.reshape(t, (*batch, n, n_heads, hd // n_heads)),
                       -3, -2)


def _merge_heads(t: Tensor) -> Tensor:
    """[..., n_heads, n, d_head] -> [..., n, n_heads*d_head]"""
    *batch, n_heads, n, dk = t.shape
    return T.reshape(T.swap_axes(t, -3, -2), (*batch, n, n_heads * dk))


def self_attention(x: Tensor, w: MhaWeights,
                   mask: Optional[np.ndarray] = None,
                   dropout_rate: float = 0.0,
                   training: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """Attention of a sequence over itself: queries, keys and values all x."""
    return multi_head_attention(x, x, x, w, mask=mask,
                                dropout_rate=dropout_rate,
                                training=training, rng=rng)


def cross_attention(query: Tensor, context: Tensor, w: MhaWeights,
                    mask: Optional[np.ndarray] = None,
                    dropout_rate: float = 0.0,
                    training: bool = False,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """Queries attend over a context sequence that supplies both keys and
    values."""
    return multi_head_attention(query, context, context, w, mask=mask,
                                dropout_rate=dropout_rate,
                                training=training, rng=rng)


def attention_probabilities(query: Tensor, key: Tensor, w: MhaWeights,
                            head: int = 0) -> np.ndarray:
    """Softmax attention matrix of one head; diagnostic only (no taping)."""
    q_h = query.data @ w.w_q[head].data
    k_h = key.data @ w.w_k[head].data
    logits = (q_h @ k_h.swapaxes(-1, -2)) / np.sqrt(w.d_head)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
