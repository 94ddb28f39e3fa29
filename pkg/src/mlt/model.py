"""The multi-label transformer: patch embedding, learned positional table,
self-attention encoder stack, label-token cross-attention decoder stack,
and a shared sigmoid prediction head.

Raw inputs arrive as per-patch feature vectors; a learnable affine map
embeds them to model width (the backbone stand-in). Each label owns one
learned token that queries the encoded patches through cross-attention,
and a single [d, 1] head projects every token to that label's probability.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from . import tensor_io
from .blocks import (DecoderLayerWeights, EncoderLayerWeights, LayerNormParams,
                     MhaWeights, MlpWeights, decoder_layer, encoder_layer,
                     init_decoder_layer, init_encoder_layer)
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(IOError):
    """Unreadable, truncated, or mismatched checkpoint file."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the reference setup:
    width 128 split over 8 heads, one encoder layer over 64 patches, two
    decoder layers over the label tokens, dropout 0.1."""

    d: int = 128
    N_h: int = 8
    N_x: int = 1
    N_l: int = 2
    n_x: int = 64
    patch_dim: int = 16
    L: int = 12
    d_mlp: int = 512
    dropout: float = 0.1
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("d", "N_h", "N_x", "N_l", "n_x", "patch_dim", "L", "d_mlp"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"ModelConfig.{name} must be positive")
        if self.d % self.N_h != 0:
            raise ConfigError(f"d={self.d} must be divisible by N_h={self.N_h}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout={self.dropout} must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"ModelConfig: unknown keys {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class ModelParams:
    """Every trainable tensor, grouped the way the optimizer routes them."""

    patch_w: Tensor                       # [patch_dim, d]
    patch_b: Tensor                       # [d]
    pos_table: Tensor                     # [n_x, d]
    encoder: list[EncoderLayerWeights]
    label_table: Tensor                   # [L, d]
    decoder: list[DecoderLayerWeights]
    head_w: Tensor                        # [d, 1]
    head_b: Tensor                        # [1]


def _named_mha(prefix: str, w: MhaWeights) -> Iterator[tuple[str, Tensor]]:
    for h, m in enumerate(w.w_q):
        yield f"{prefix}.q.{h}", m
    for h, m in enumerate(w.w_k):
        yield f"{prefix}.k.{h}", m
    for h, m in enumerate(w.w_v):
        yield f"{prefix}.v.{h}", m
    yield f"{prefix}.out", w.w_o


def _named_mlp(prefix: str, w: MlpWeights) -> Iterator[tuple[str, Tensor]]:
    yield f"{prefix}.expand.weight", w.w_g
    yield f"{prefix}.expand.bias", w.b_g
    yield f"{prefix}.contract.weight", w.w_l
    yield f"{prefix}.contract.bias", w.b_l


def _named_ln(prefix: str, ln: LayerNormParams) -> Iterator[tuple[str, Tensor]]:
    yield f"{prefix}.gamma", ln.gamma
    yield f"{prefix}.beta", ln.beta


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    """Fixed, deterministic (name, tensor) enumeration; the checkpoint
    manifest and optimizer state both follow this order."""
    out: list[tuple[str, Tensor]] = [
        ("patch_embed.weight", params.patch_w),
        ("patch_embed.bias", params.patch_b),
        ("pos_embed.table", params.pos_table),
    ]
    for i, layer in enumerate(params.encoder):
        p = f"encoder.{i}"
        out.extend(_named_mha(f"{p}.sa", layer.sa))
        out.extend(_named_ln(f"{p}.ln_sa", layer.ln_sa))
        out.extend(_named_mlp(f"{p}.mlp", layer.mlp))
        out.extend(_named_ln(f"{p}.ln_mlp", layer.ln_mlp))
    out.append(("label_embed.table", params.label_table))
    for i, layer in enumerate(params.decoder):
        p = f"decoder.{i}"
        out.extend(_named_mha(f"{p}.sa", layer.sa_tokens))
        out.extend(_named_ln(f"{p}.ln_sa", layer.ln_sa))
        out.extend(_named_mha(f"{p}.ca", layer.ca_tokens_inputs))
        out.extend(_named_ln(f"{p}.ln_ca", layer.ln_ca))
        out.extend(_named_mlp(f"{p}.mlp", layer.mlp))
        out.extend(_named_ln(f"{p}.ln_mlp", layer.ln_mlp))
    out.append(("head.weight", params.head_w))
    out.append(("head.bias", params.head_b))
    return out


def parameter_groups(params: ModelParams) -> dict[str, list[tuple[str, Tensor]]]:
    """Optimizer routing: the patch embedding plays the pretrained-backbone
    role; the positional table and encoder stack form the input-attention
    part; label embedding, decoder stack and head form the token part."""
    groups: dict[str, list[tuple[str, Tensor]]] = {
        "backbone": [], "encoder": [], "decoder": []}
    for name, t in named_parameters(params):
        if name.startswith("patch_embed"):
            groups["backbone"].append((name, t))
        elif name.startswith(("pos_embed", "encoder")):
            groups["encoder"].append((name, t))
        else:
            groups["decoder"].append((name, t))
    return groups


def params_from_tensors(cfg: ModelConfig, tensors: list[Tensor]) -> ModelParams:
    """Assemble a ModelParams from tensors given in named_parameters order
    (the checkpoint/optimizer order)."""
    it = iter(tensors)

    def nxt() -> Tensor:
        return next(it)

    def mha() -> MhaWeights:
        return MhaWeights(w_q=[nxt() for _ in range(cfg.N_h)],
                          w_k=[nxt() for _ in range(cfg.N_h)],
                          w_v=[nxt() for _ in range(cfg.N_h)],
                          w_o=nxt())

    def ln() -> LayerNormParams:
        return LayerNormParams(gamma=nxt(), beta=nxt())

    def mlp() -> MlpWeights:
        return MlpWeights(w_g=nxt(), b_g=nxt(), w_l=nxt(), b_l=nxt())

    params = ModelParams(
        patch_w=nxt(), patch_b=nxt(), pos_table=nxt(),
        encoder=[EncoderLayerWeights(sa=mha(), ln_sa=ln(), mlp=mlp(),
                                     ln_mlp=ln())
                 for _ in range(cfg.N_x)],
        label_table=nxt(),
        decoder=[DecoderLayerWeights(sa_tokens=mha(), ln_sa=ln(),
                                     ca_tokens_inputs=mha(), ln_ca=ln(),
                                     mlp=mlp(), ln_mlp=ln())
                 for _ in range(cfg.N_l)],
        head_w=nxt(), head_b=nxt(),
    )
    leftover = sum(1 for _ in it)
    if leftover:
        raise ShapeError(f"params_from_tensors: {leftover} unused tensors")
    return params


def init_params(cfg: ModelConfig, rng: Optional[np.random.Generator] = None) -> ModelParams:
    """Glorot-uniform projections, zero biases, N(0, 0.02^2) position and
    label tables, unit/zero layer-norm affines. Deterministic given seed."""
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)),
                      requires_grad=True)

    params = ModelParams(
        patch_w=glorot(cfg.patch_dim, cfg.d),
        patch_b=Tensor(np.zeros(cfg.d), requires_grad=True),
        pos_table=Tensor(rng.normal(0.0, 0.02, (cfg.n_x, cfg.d)),
                         requires_grad=True),
        encoder=[init_encoder_layer(cfg.d, cfg.N_h, cfg.d_mlp, rng)
                 for _ in range(cfg.N_x)],
        label_table=Tensor(rng.normal(0.0, 0.02, (cfg.L, cfg.d)),
                           requires_grad=True),
        decoder=[init_decoder_layer(cfg.d, cfg.N_h, cfg.d_mlp, rng)
                 for _ in range(cfg.N_l)],
        head_w=glorot(cfg.d, 1),
        head_b=Tensor(np.zeros(1), requires_grad=True),
    )
    return params


def forward(params: ModelParams, cfg: ModelConfig, x_raw: Tensor,
            training: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Map raw patches [B, n_x, patch_dim] to label probabilities [B, L].

    Embed and position-tag the patches, encode them with the self-attention
    stack, then let the label tokens query the encoding through the decoder
    stack; the shared head projects each token to a probability.
    """
    if not isinstance(x_raw, Tensor):
        x_raw = Tensor(x_raw)
    if x_raw.ndim != 3 or x_raw.shape[1] != cfg.n_x or x_raw.shape[2] != cfg.patch_dim:
        raise ShapeError(f"forward: input {x_raw.shape}, expected "
                         f"[B, {cfg.n_x}, {cfg.patch_dim}]")
    rate = cfg.dropout if training else 0.0

    x = T.add(T.matmul(x_raw, params.patch_w), params.patch_b)
    x = T.add(x, params.pos_table)
    for layer in params.encoder:
        x = encoder_layer(x, layer, rate, training, rng)

    # [L, d] label tokens broadcast against the batched encoding inside
    # the first cross-attention
    tokens: Tensor = params.label_table
    for layer in params.decoder:
        tokens = decoder_layer(tokens, x, layer, rate, training, rng)

    logits = T.add(T.matmul(tokens, params.head_w), params.head_b)
    probs = T.sigmoid(logits)
    batch = x_raw.shape[0]
    return T.reshape(probs, (batch, cfg.L))


# ---------------------------------------------------------------------------
# checkpoints: one-line JSON header (config + ordered manifest with byte
# offsets), then the concatenated binary tensor records
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path: str) -> None:
    names = named_parameters(params)
    manifest = []
    offset = 0
    payload = io.BytesIO()
    for name, t in names:
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        tensor_io.write_tensor(payload, t.data)
        offset += tensor_io.record_size(t.data)
    header = json.dumps({"format": "mlt-checkpoint-v1",
                         "config": cfg.to_dict(),
                         "params": manifest},
                        sort_keys=True, separators=(",", ":"))
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header.encode("utf-8"))
            fh.write(b"\n")
            fh.write(payload.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> tuple[ModelParams, ModelConfig]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable header: {exc}")
        if header.get("format") != "mlt-checkpoint-v1":
            raise CheckpointError(f"{path}: not a checkpoint "
                                  f"(format={header.get('format')!r})")
        cfg = ModelConfig.from_dict(header["config"])
        params = init_params(cfg, rng=np.random.default_rng(0))
        by_name = dict(named_parameters(params))
        expected = [m["name"] for m in header["params"]]
        if expected != [n for n, _ in named_parameters(params)]:
            raise CheckpointError(f"{path}: parameter manifest does not match "
                                  f"the configured architecture")
        payload_start = fh.tell()
        for meta in header["params"]:
            fh.seek(payload_start + meta["offset"])
            try:
                arr = tensor_io.read_tensor(fh)
            except tensor_io.CorruptTensorError as exc:
                raise CheckpointError(f"{path}: {meta['name']}: {exc}")
            target = by_name[meta["name"]]
            if arr.shape != target.shape:
                raise CheckpointError(
                    f"{path}: {meta['name']} has shape {arr.shape}, "
                    f"config implies {target.shape}")
            target.data = arr
    return params, cfg
