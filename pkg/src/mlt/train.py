"""Training loop: mixup and noise augmentation, imbalance-weighted loss,
grouped AdamW with per-group schedules, per-step JSON logging, and best /
final checkpointing. Fully deterministic given the config seed."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import data as D
from . import evaluate as E
from . import losses as L
from . import model as M
from . import optim as O
from . import tensor as T
from .config import RunConfig, ScheduleConfig
from .model import ConfigError
from .tensor import Tensor


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainResult:
    steps: int
    log_path: str
    final_checkpoint: str
    best_checkpoint: Optional[str]
    best_macro_f1: Optional[float]


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent deterministic generators for each randomness consumer;
    spawned in a fixed order so runs with equal seeds are bit-identical."""
    children = np.random.SeedSequence(seed).spawn(5)
    names = ("init", "batch", "dropout", "mixup", "augment")
    return {name: np.random.default_rng(seq)
            for name, seq in zip(names, children)}


def check_dataset_matches_model(ds: D.Dataset, cfg: RunConfig) -> None:
    m = cfg.model
    if ds.X.shape[1:] != (m.n_x, m.patch_dim):
        raise ConfigError(f"dataset patches {ds.X.shape[1:]} vs model "
                          f"({m.n_x}, {m.patch_dim})")
    if ds.y.shape[1] != m.L:
        raise ConfigError(f"dataset has {ds.y.shape[1]} labels, model "
                          f"expects {m.L}")


def resolve_loss_config(cfg: RunConfig, train_ds: D.Dataset) -> L.LossConfig:
    weights = cfg.loss.weights
    if weights == "frequency":
        weights = L.frequency_weights(train_ds.positive_rates).tolist()
    return L.LossConfig(weights=weights,
                        dice_weight=cfg.loss.dice_weight,
                        dice_smooth=cfg.loss.dice_smooth,
                        label_smoothing=cfg.loss.label_smoothing,
                        clamp_p=cfg.loss.clamp_p).validate()


def resolve_schedules(cfg: RunConfig, steps_per_epoch: int) -> dict[str, O.ScheduleSpec]:
    def spec(sc: ScheduleConfig, default_scale: int) -> O.ScheduleSpec:
        return O.ScheduleSpec(
            kind=sc.kind, lr0=sc.lr0, decay=sc.decay,
            interval=sc.interval if sc.interval is not None else float(steps_per_epoch),
            scale_dim=sc.scale_dim if sc.scale_dim is not None else default_scale,
            warmup_steps=sc.warmup_steps).validate()

    return {"backbone": spec(cfg.optim.backbone, 1),
            "encoder": spec(cfg.optim.encoder, cfg.model.n_x),
            "decoder": spec(cfg.optim.decoder, cfg.model.L)}


def predict_probs(params: M.ModelParams, model_cfg: M.ModelConfig,
                  X: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode forward over a whole dataset, batched."""
    chunks = []
    for start in range(0, X.shape[0], batch_size):
        xb = Tensor(X[start:start + batch_size])
        chunks.append(M.forward(params, model_cfg, xb, training=False).data)
    return np.concatenate(chunks, axis=0)


def _macro_f1(params, model_cfg, ds: D.Dataset, tau: float) -> float:
    probs = predict_probs(params, model_cfg, ds.X)
    _, macro = E.f1_scores(E.threshold(probs, tau), ds.y, ds.mask)
    return macro


def train(cfg: RunConfig) -> TrainResult:
    cfg.validate()
    if cfg.data.train_path is None:
        raise ConfigError("data.train_path is required for training")
    train_ds = D.load_dataset(cfg.data.train_path)
    check_dataset_matches_model(train_ds, cfg)
    val_ds = None
    if cfg.data.val_path is not None:
        val_ds = D.load_dataset(cfg.data.val_path)
        check_dataset_matches_model(val_ds, cfg)

    rngs = rng_streams(cfg.run.seed)
    params = M.init_params(cfg.model, rngs["init"])
    loss_cfg = resolve_loss_config(cfg, train_ds)
    steps_per_epoch = math.ceil(train_ds.num_samples / cfg.data.batch_size)
    opt = O.GroupedAdamW(M.parameter_groups(params),
                         resolve_schedules(cfg, steps_per_epoch),
                         beta1=cfg.optim.beta1, beta2=cfg.optim.beta2,
                         eps=cfg.optim.eps,
                         weight_decay=cfg.optim.weight_decay)

    os.makedirs(cfg.run.checkpoint_dir, exist_ok=True)
    final_path = os.path.join(cfg.run.checkpoint_dir, "final.ckpt")
    best_path = os.path.join(cfg.run.checkpoint_dir, "best.ckpt")
    log_dir = os.path.dirname(os.path.abspath(cfg.run.log_path))
    os.makedirs(log_dir, exist_ok=True)
    log_fd, log_tmp = tempfile.mkstemp(dir=log_dir, suffix=".tmp")

    step = 0
    best_macro: Optional[float] = None
    try:
        with os.fdopen(log_fd, "w") as log:
            for _epoch in range(cfg.run.epochs):
                if cfg.run.max_steps is not None and step >= cfg.run.max_steps:
                    break
                for xb, yb, mb in D.iterate_batches(train_ds,
                                                    cfg.data.batch_size,
                                                    rngs["batch"]):
                    if cfg.run.max_steps is not None and step >= cfg.run.max_steps:
                        break
                    step += 1
                    if cfg.data.mixup_alpha > 0.0:
                        lam = D.sample_mixup_lambda(cfg.data.mixup_alpha,
                                                    rngs["mixup"])
                        perm = rngs["mixup"].permutation(xb.shape[0])
                        xb, yb, mb = D.mixup((xb, yb, mb),
                                             (xb[perm], yb[perm], mb[perm]), lam)
                    if cfg.data.noise_std_augment > 0.0:
                        xb = xb + rngs["augment"].normal(
                            0.0, cfg.data.noise_std_augment, xb.shape)
                    probs = M.forward(params, cfg.model, Tensor(xb),
                                      training=True, rng=rngs["dropout"])
                    loss, parts = L.total_loss(yb, mb, probs, loss_cfg)
                    if not np.isfinite(parts["total"]):
                        raise DivergenceError(
                            f"non-finite loss {parts['total']} at step {step}")
                    opt.zero_grad()
                    T.backward(loss)
                    lrs = opt.step(step)
                    log.write(json.dumps({
                        "step": step,
                        "lr_backbone": lrs["backbone"],
                        "lr_encoder": lrs["encoder"],
                        "lr_decoder": lrs["decoder"],
                        "bce": parts["bce"],
                        "dice": parts["dice"],
                        "total": parts["total"],
                    }) + "\n")
                if val_ds is not None:
                    macro = _macro_f1(params, cfg.model, val_ds,
                                      cfg.eval.threshold)
                    log.write(json.dumps({"step": step,
                                          "val_macro_f1": macro}) + "\n")
                    if best_macro is None or macro > best_macro:
                        best_macro = macro
                        M.save_checkpoint(params, cfg.model, best_path)
        M.save_checkpoint(params, cfg.model, final_path)
        os.replace(log_tmp, cfg.run.log_path)
    except BaseException:
        if os.path.exists(log_tmp):
            os.unlink(log_tmp)
        raise
    return TrainResult(steps=step, log_path=cfg.run.log_path,
                       final_checkpoint=final_path,
                       best_checkpoint=best_path if best_macro is not None else None,
                       best_macro_f1=best_macro)
