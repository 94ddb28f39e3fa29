"""Temporal smoothing and macro-F1 evaluation.

Frame-level probabilities from the model are smoothed per label with a
centered moving mean whose window is truncated at sequence edges (never
crossing a video boundary), then thresholded; F1 is computed per label
over annotated entries and averaged without weighting.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


def moving_mean(probs: np.ndarray, window: int) -> np.ndarray:
    """Centered moving mean over the frame axis of one sequence [T, L].

    The window covers floor((w-1)/2) frames back and floor(w/2) frames
    ahead, truncated at the sequence edges; frame count is preserved.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError(f"expected a nonempty [frames, labels] array, "
                         f"got shape {probs.shape}")
    if window == 1:
        return probs.copy()
    frames = probs.shape[0]
    back = (window - 1) // 2
    ahead = window // 2
    csum = np.vstack([np.zeros((1, probs.shape[1])), np.cumsum(probs, axis=0)])
    out = np.empty_like(probs)
    for f in range(frames):
        lo = max(0, f - back)
        hi = min(frames, f + ahead + 1)
        out[f] = (csum[hi] - csum[lo]) / (hi - lo)
    return out


def smooth_sequences(probs: np.ndarray, sequences: Sequence[dict],
                     window: int) -> np.ndarray:
    """Apply moving_mean independently inside each sequence boundary."""
    out = np.empty_like(np.asarray(probs, dtype=np.float64))
    covered = 0
    for seq in sequences:
        s, ln = seq["start"], seq["length"]
        out[s:s + ln] = moving_mean(probs[s:s + ln], window)
        covered += ln
    if covered != probs.shape[0]:
        raise ValueError(f"sequences cover {covered} frames, "
                         f"got {probs.shape[0]}")
    return out


def threshold(probs: np.ndarray, tau: float) -> np.ndarray:
    """Binarize with the >= convention."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {tau}")
    return (np.asarray(probs) >= tau).astype(np.float64)


def confusion_counts(pred: np.ndarray, y: np.ndarray,
                     mask: Optional[np.ndarray] = None) -> dict[str, np.ndarray]:
    """Per-label TP/FP/FN/TN over annotated entries."""
    pred = np.asarray(pred, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mask is None:
        mask = np.ones_like(y)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != y.shape or mask.shape != y.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, y {y.shape}, "
                         f"mask {mask.shape}")
    return {
        "tp": (pred * y * mask).sum(axis=0),
        "fp": (pred * (1 - y) * mask).sum(axis=0),
        "fn": ((1 - pred) * y * mask).sum(axis=0),
        "tn": ((1 - pred) * (1 - y) * mask).sum(axis=0),
    }


def f1_scores(pred: np.ndarray, y: np.ndarray,
              mask: Optional[np.ndarray] = None) -> tuple[np.ndarray, float]:
    """Per-label F1 = 2TP / (2TP + FP + FN), defined as 0 when the
    denominator is 0, and the unweighted macro mean over all labels."""
    counts = confusion_counts(pred, y, mask)
    denom = 2 * counts["tp"] + counts["fp"] + counts["fn"]
    per_label = np.where(denom > 0, 2 * counts["tp"] / np.where(denom > 0, denom, 1.0), 0.0)
    return per_label, float(per_label.mean())


def evaluation_report(probs: np.ndarray, y: np.ndarray, mask: np.ndarray,
                      sequences: Sequence[dict], labels: Sequence[str],
                      tau: float = 0.5, window: int = 20) -> dict:
    """Metrics with and without temporal smoothing, as a JSON-ready dict."""
    raw_pred = threshold(probs, tau)
    smoothed = smooth_sequences(probs, sequences, window)
    smoothed_pred = threshold(smoothed, tau)
    report = {"threshold": tau, "smoothing_window": window,
              "num_samples": int(np.asarray(y).shape[0]), "labels": list(labels)}
    for key, pred in (("unsmoothed", raw_pred), ("smoothed", smoothed_pred)):
        per_label, macro = f1_scores(pred, y, mask)
        counts = confusion_counts(pred, y, mask)
        report[key] = {
            "per_label_f1": per_label.tolist(),
            "macro_f1": macro,
            "confusion": {k: v.tolist() for k, v in counts.items()},
        }
    return report
