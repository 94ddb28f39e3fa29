"""Imbalance-aware multi-label objective.

Per-label binary cross entropy, weighted by inverse-positive-rate
coefficients and masked to the annotated entries, plus a soft Dice
complement that aligns training with F1 evaluation. Targets may be
smoothed; masked entries contribute exactly zero to the value and to
the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class EmptyBatchError(ValueError):
    """Every entry of the batch is masked out; no loss is defined."""


@dataclass
class LossConfig:
    """weights: 'uniform', explicit per-label list, or per-label positive
    rates to be turned into frequency weights by the caller."""

    weights: Union[str, list, None] = "uniform"
    dice_weight: float = 1.0
    dice_smooth: float = 1.0
    label_smoothing: float = 0.0
    clamp_p: float = 1e-12

    def validate(self) -> "LossConfig":
        if self.dice_weight < 0:
            raise ValueError(f"dice_weight must be >= 0, got {self.dice_weight}")
        if self.dice_smooth <= 0:
            raise ValueError(f"dice_smooth must be > 0, got {self.dice_smooth}")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ValueError(f"label_smoothing must be in [0, 0.5), "
                             f"got {self.label_smoothing}")
        if not 0.0 < self.clamp_p < 0.5:
            raise ValueError(f"clamp_p must be in (0, 0.5), got {self.clamp_p}")
        return self

    def resolved_weights(self, num_labels: int) -> np.ndarray:
        if self.weights is None or self.weights == "uniform":
            return np.ones(num_labels)
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (num_labels,):
            raise ShapeError(f"loss weights shape {w.shape}, "
                             f"expected ({num_labels},)")
        if (w <= 0).any():
            raise ValueError("loss weights must be strictly positive")
        return w


def frequency_weights(positive_rates) -> np.ndarray:
    """Inverse-positive-rate weights normalized to sum to the label count,
    so equal rates give all-ones."""
    r = np.asarray(positive_rates, dtype=np.float64)
    if ((r <= 0) | (r >= 1)).any():
        raise ValueError(f"positive rates must lie in (0, 1), got {r}")
    inv = 1.0 / r
    return inv / inv.sum() * r.size


def smooth_labels(y, epsilon: float):
    """Pull binary targets epsilon/2 toward the opposite class."""
    if not 0.0 <= epsilon < 0.5:
        raise ValueError(f"label smoothing must be in [0, 0.5), got {epsilon}")
    arr = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    return Tensor(arr * (1.0 - epsilon) + epsilon / 2.0)


def bce(y, p: Tensor, clamp_p: float = 1e-12) -> Tensor:
    """Elementwise binary cross entropy with probability clamping."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    pc = T.clip(p, clamp_p, 1.0 - clamp_p)
    return -(y * T.tlog(pc) + (1.0 - y) * T.tlog(1.0 - pc))


def _as_constant(x) -> Tensor:
    return x.detach() if isinstance(x, Tensor) else Tensor(x)


def _check_bl(name: str, arr: np.ndarray, shape: tuple) -> None:
    if arr.shape != shape:
        raise ShapeError(f"{name} shape {arr.shape}, expected {shape}")


def weighted_masked_bce(y, mask, p: Tensor, cfg: LossConfig) -> Tensor:
    """Per-label-weighted BCE summed over annotated entries and normalized
    by their count; masked entries contribute exactly zero gradient."""
    y = _as_constant(y)
    mask = _as_constant(mask)
    _check_bl("targets", y.data, p.shape)
    _check_bl("mask", mask.data, p.shape)
    count = float(mask.data.sum())
    if count == 0:
        raise EmptyBatchError("all label entries are masked out")
    w = cfg.resolved_weights(p.shape[-1])
    per_entry = bce(y, p, cfg.clamp_p)
    weighted = per_entry * Tensor(w) * mask
    return T.tsum(weighted) / count


def dice_loss(y, mask, p: Tensor, cfg: LossConfig) -> Tensor:
    """One minus the mean smoothed Dice score over labels that have at
    least one annotated entry (squared-denominator soft Dice)."""
    y = _as_constant(y)
    mask = _as_constant(mask)
    _check_bl("targets", y.data, p.shape)
    _check_bl("mask", mask.data, p.shape)
    annotated_per_label = mask.data.sum(axis=0)
    included = annotated_per_label > 0
    if not included.any():
        raise EmptyBatchError("every label has zero annotated entries")
    eps = cfg.dice_smooth
    pm = p * mask
    ym = y * mask
    overlap = T.tsum(pm * ym, axis=0)
    pp = T.tsum(pm * pm, axis=0)
    yy = T.tsum(ym * ym, axis=0)
    dice = (T.scale(overlap, 2.0) + eps) / (pp + yy + eps)
    selector = Tensor(included.astype(np.float64))
    mean_dice = T.tsum(dice * selector) / float(included.sum())
    return 1.0 - mean_dice


def total_loss(y, mask, p: Tensor, cfg: LossConfig) -> tuple[Tensor, dict]:
    """Weighted masked BCE on smoothed targets plus the Dice complement.
    Returns the scalar loss tensor and the component values for logging."""
    smoothed = smooth_labels(y, cfg.label_smoothing)
    bce_term = weighted_masked_bce(smoothed, mask, p, cfg)
    if cfg.dice_weight > 0.0:
        dice_term = dice_loss(y, mask, p, cfg)
        total = bce_term + T.scale(dice_term, cfg.dice_weight)
        parts = {"bce": bce_term.item(), "dice": dice_term.item()}
    else:
        total = bce_term
        parts = {"bce": bce_term.item(), "dice": 0.0}
    parts["total"] = total.item()
    return total, parts
