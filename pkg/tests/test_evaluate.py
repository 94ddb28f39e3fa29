"""Smoothing and F1 against hand-evaluated fixtures plus the
flip-noise-recovery property that motivates temporal smoothing."""

import numpy as np
import numpy.testing as npt
import pytest

from mlt import data as D
from mlt import evaluate as E
from mlt.data import SyntheticSpec


def test_moving_mean_constant_unchanged():
    seq = np.full((7, 2), 0.4)
    npt.assert_allclose(E.moving_mean(seq, 5), seq, atol=1e-12)


def test_moving_mean_hand_evaluated_window3():
    seq = np.array([[1.0], [0.0], [0.0], [1.0]])
    out = E.moving_mean(seq, 3)
    npt.assert_allclose(out[:, 0], [0.5, 1 / 3, 1 / 3, 0.5], atol=1e-15)


def test_moving_mean_window1_is_identity():
    rng = np.random.default_rng(0)
    seq = rng.uniform(0, 1, (9, 3))
    npt.assert_array_equal(E.moving_mean(seq, 1), seq)


def test_moving_mean_preserves_range_and_length():
    rng = np.random.default_rng(1)
    seq = rng.uniform(0.2, 0.9, (50, 4))
    out = E.moving_mean(seq, 20)
    assert out.shape == seq.shape
    for t in range(4):
        assert out[:, t].min() >= seq[:, t].min() - 1e-12
        assert out[:, t].max() <= seq[:, t].max() + 1e-12


def test_moving_mean_commutes_with_label_permutation():
    rng = np.random.default_rng(2)
    seq = rng.uniform(0, 1, (30, 5))
    perm = rng.permutation(5)
    npt.assert_allclose(E.moving_mean(seq, 7)[:, perm],
                        E.moving_mean(seq[:, perm], 7), atol=1e-14)


def test_moving_mean_rejects_empty_or_bad_window():
    with pytest.raises(ValueError):
        E.moving_mean(np.zeros((0, 2)), 3)
    with pytest.raises(ValueError):
        E.moving_mean(np.zeros((4, 2)), 0)


def test_smooth_sequences_respects_boundaries():
    probs = np.zeros((6, 1))
    probs[2, 0] = 1.0  # last frame of sequence one
    seqs = [{"id": "a", "start": 0, "length": 3},
            {"id": "b", "start": 3, "length": 3}]
    out = E.smooth_sequences(probs, seqs, 3)
    # the spike must not leak into the second sequence
    npt.assert_array_equal(out[3:], np.zeros((3, 1)))
    # truncated centered windows over [0, 0, 1]
    npt.assert_allclose(out[:3, 0], [0.0, 1 / 3, 0.5])


def test_threshold_boundary_and_monotonicity():
    probs = np.array([[0.5, 0.2, 0.8]])
    npt.assert_array_equal(E.threshold(probs, 0.5), [[1.0, 0.0, 1.0]])
    assert E.threshold(probs, 0.9).sum() == 0.0
    low = E.threshold(probs, 0.3)
    high = E.threshold(probs, 0.6)
    assert ((high == 1.0) <= (low == 1.0)).all()
    with pytest.raises(ValueError):
        E.threshold(probs, 0.0)


def test_f1_perfect_predictions():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, (20, 4)).astype(float)
    per_label, macro = E.f1_scores(y.copy(), y)
    npt.assert_array_equal(per_label, np.ones(4))
    assert macro == 1.0


def test_f1_confusion_fixture():
    # one label: TP=1, FP=1, FN=1 -> F1 = 0.5
    y = np.array([[1.0], [0.0], [1.0], [0.0]])
    pred = np.array([[1.0], [1.0], [0.0], [0.0]])
    per_label, macro = E.f1_scores(pred, y)
    npt.assert_allclose(per_label, [0.5])
    npt.assert_allclose(macro, 0.5)


def test_f1_degenerate_label_scores_zero():
    y = np.zeros((5, 2))
    y[:, 1] = 1.0
    pred = np.zeros((5, 2))
    pred[:, 1] = 1.0
    per_label, macro = E.f1_scores(pred, y)
    npt.assert_array_equal(per_label, [0.0, 1.0])
    npt.assert_allclose(macro, 0.5)


def test_f1_sample_permutation_invariance_label_equivariance():
    rng = np.random.default_rng(4)
    y = rng.integers(0, 2, (30, 3)).astype(float)
    pred = rng.integers(0, 2, (30, 3)).astype(float)
    per_label, _ = E.f1_scores(pred, y)
    rows = rng.permutation(30)
    per_label_rows, _ = E.f1_scores(pred[rows], y[rows])
    npt.assert_allclose(per_label_rows, per_label)
    cols = rng.permutation(3)
    per_label_cols, _ = E.f1_scores(pred[:, cols], y[:, cols])
    npt.assert_allclose(per_label_cols, per_label[cols])


def test_f1_respects_mask():
    y = np.array([[1.0, 1.0], [0.0, 1.0]])
    pred = np.array([[1.0, 0.0], [0.0, 0.0]])
    mask = np.array([[1.0, 0.0], [1.0, 0.0]])
    per_label, _ = E.f1_scores(pred, y, mask)
    npt.assert_allclose(per_label, [1.0, 0.0])


def test_smoothing_recovers_flip_corrupted_segments():
    # segment-structured ground truth with 10% iid prediction flips:
    # the moving mean must improve macro F1
    spec = SyntheticSpec(n_x=16, grid_side=4, patch_dim=4, L=4,
                         num_sequences=10, sequence_length=400,
                         min_segment=40, max_segment=80,
                         positive_rates=[0.25, 0.3, 0.35, 0.4],
                         patches_per_label=2, seed=7).validate()
    ds = D.generate_dataset(spec)
    rng = np.random.default_rng(13)
    flips = rng.random(ds.y.shape) < 0.1
    noisy = np.abs(ds.y - flips)
    _, macro_before = E.f1_scores(E.threshold(noisy, 0.5), ds.y)
    smoothed = E.smooth_sequences(noisy, ds.sequences, 20)
    _, macro_after = E.f1_scores(E.threshold(smoothed, 0.5), ds.y)
    assert macro_after > macro_before


def test_evaluation_report_contains_both_blocks():
    rng = np.random.default_rng(5)
    probs = rng.uniform(0, 1, (20, 3))
    y = rng.integers(0, 2, (20, 3)).astype(float)
    seqs = [{"id": "a", "start": 0, "length": 20}]
    report = E.evaluation_report(probs, y, np.ones_like(y), seqs,
                                 ["l0", "l1", "l2"], tau=0.5, window=5)
    assert "smoothed" in report and "unsmoothed" in report
    for block in ("smoothed", "unsmoothed"):
        assert len(report[block]["per_label_f1"]) == 3
        assert 0.0 <= report[block]["macro_f1"] <= 1.0
        assert set(report[block]["confusion"]) == {"tp", "fp", "fn", "tn"}
