"""Transformer sublayers: MLP block, encoder layer, decoder layer.

Residual wiring is post-norm: normalize(residual + dropout(sublayer)).
The MLP block additionally carries its own dropout after each dense layer,
so on the residual path its output passes through dropout twice — that is
the wiring this model trains with, kept as-is rather than deduplicated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import MhaWeights, cross_attention, init_mha, self_attention
from .tensor import ShapeError, Tensor

LN_EPS = 1e-5


@dataclass
class MlpWeights:
    """Two dense layers: expansion with GELU, then linear contraction."""

    w_g: Tensor  # [d, d_mlp]
    b_g: Tensor  # [d_mlp]
    w_l: Tensor  # [d_mlp, d]
    b_l: Tensor  # [d]

    def __post_init__(self):
        d, d_mlp = self.w_g.shape
        if self.b_g.shape != (d_mlp,) or self.w_l.shape != (d_mlp, d) \
                or self.b_l.shape != (d,):
            raise ShapeError(
                f"MlpWeights: inconsistent shapes w_g={self.w_g.shape} "
                f"b_g={self.b_g.shape} w_l={self.w_l.shape} b_l={self.b_l.shape}")


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError(f"LayerNormParams: gamma {self.gamma.shape}, "
                             f"beta {self.beta.shape}")


@dataclass
class EncoderLayerWeights:
    sa: MhaWeights
    mlp: MlpWeights
    ln_sa: LayerNormParams
    ln_mlp: LayerNormParams


@dataclass
class DecoderLayerWeights:
    sa_tokens: MhaWeights
    ca_tokens_inputs: MhaWeights
    mlp: MlpWeights
    ln_sa: LayerNormParams
    ln_ca: LayerNormParams
    ln_mlp: LayerNormParams


def init_mlp(d: int, d_mlp: int, rng: np.random.Generator) -> MlpWeights:
    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)),
                      requires_grad=True)

    return MlpWeights(
        w_g=glorot(d, d_mlp),
        b_g=Tensor(np.zeros(d_mlp), requires_grad=True),
        w_l=glorot(d_mlp, d),
        b_l=Tensor(np.zeros(d), requires_grad=True),
    )


def init_layer_norm(d: int) -> LayerNormParams:
    return LayerNormParams(gamma=Tensor(np.ones(d), requires_grad=True),
                           beta=Tensor(np.zeros(d), requires_grad=True))


def init_encoder_layer(d: int, n_heads: int, d_mlp: int,
                       rng: np.random.Generator) -> EncoderLayerWeights:
    return EncoderLayerWeights(sa=init_mha(d, n_heads, rng),
                               mlp=init_mlp(d, d_mlp, rng),
                               ln_sa=init_layer_norm(d),
                               ln_mlp=init_layer_norm(d))


def init_decoder_layer(d: int, n_heads: int, d_mlp: int,
                       rng: np.random.Generator) -> DecoderLayerWeights:
    return DecoderLayerWeights(sa_tokens=init_mha(d, n_heads, rng),
                               ca_tokens_inputs=init_mha(d, n_heads, rng),
                               mlp=init_mlp(d, d_mlp, rng),
                               ln_sa=init_layer_norm(d),
                               ln_ca=init_layer_norm(d),
                               ln_mlp=init_layer_norm(d))


def mlp_block(x: Tensor, w: MlpWeights, rate: float = 0.0,
              training: bool = False,
              rng: Optional[np.random.Generator] = None) -> Tensor:
    hidden = T.dropout(T.gelu(T.add(T.matmul(x, w.w_g), w.b_g)),
                       rate, training, rng)
    return T.dropout(T.add(T.matmul(hidden, w.w_l), w.b_l),
                     rate, training, rng)


def _add_norm(residual: Tensor, sublayer_out: Tensor, ln: LayerNormParams,
              rate: float, training: bool,
              rng: Optional[np.random.Generator]) -> Tensor:
    dropped = T.dropout(sublayer_out, rate, training, rng)
    return T.layer_norm(T.add(residual, dropped), ln.gamma, ln.beta, eps=LN_EPS)


def encoder_layer(x: Tensor, w: EncoderLayerWeights, rate: float = 0.0,
                  training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Self-attention then MLP, each wrapped in dropout + residual + norm."""
    attended = self_attention(x, w.sa)
    x = _add_norm(x, attended, w.ln_sa, rate, training, rng)
    expanded = mlp_block(x, w.mlp, rate, training, rng)
    return _add_norm(x, expanded, w.ln_mlp, rate, training, rng)


def decoder_layer(tokens: Tensor, encoded: Tensor, w: DecoderLayerWeights,
                  rate: float = 0.0, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Token self-attention, cross-attention over the encoded inputs, then
    MLP; post-norm residuals throughout, in exactly that order."""
    attended = self_attention(tokens, w.sa_tokens)
    tokens = _add_norm(tokens, attended, w.ln_sa, rate, training, rng)
    mixed = cross_attention(tokens, encoded, w.ca_tokens_inputs)
    tokens = _add_norm(tokens, mixed, w.ln_ca, rate, training, rng)
    expanded = mlp_block(tokens, w.mlp, rate, training, rng)
    return _add_norm(tokens, expanded, w.ln_mlp, rate, training, rng)
