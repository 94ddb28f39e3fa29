"""Objective components against hand-evaluated closed forms, masking
semantics, and gradient checks."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlt import gradcheck as gc
from mlt import losses as L
from mlt import tensor as T
from mlt.losses import EmptyBatchError, LossConfig
from mlt.tensor import Tensor

LN2 = math.log(2.0)


def cfg_plain(**kw):
    base = dict(weights="uniform", dice_weight=0.0, label_smoothing=0.0)
    base.update(kw)
    return LossConfig(**base).validate()


# ---------------------------------------------------------------------------
# bce
# ---------------------------------------------------------------------------


def test_bce_perfect_prediction_is_zero():
    out = L.bce(Tensor([1.0]), Tensor([1.0 - 1e-15]))
    assert out.data[0] < 1e-11


def test_bce_half_is_ln2_both_classes():
    out = L.bce(Tensor([1.0, 0.0]), Tensor([0.5, 0.5]))
    npt.assert_allclose(out.data, [LN2, LN2], atol=1e-12)


def test_bce_clamps_extreme_probabilities():
    out = L.bce(Tensor([1.0]), Tensor([0.0]))
    npt.assert_allclose(out.data, [-math.log(1e-12)], rtol=1e-9)
    assert np.isfinite(out.data).all()


# ---------------------------------------------------------------------------
# weighted / masked bce
# ---------------------------------------------------------------------------


def test_weighted_masked_bce_hand_value():
    y = [[1.0, 0.0]]
    p = Tensor([[0.5, 0.5]])
    mask = [[1.0, 1.0]]
    cfg = cfg_plain(weights=[2.0, 1.0])
    out = L.weighted_masked_bce(y, mask, p, cfg)
    npt.assert_allclose(out.item(), 1.5 * LN2, atol=1e-12)


def test_uniform_full_mask_reduces_to_mean_bce():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, (4, 3)).astype(float)
    p = Tensor(rng.uniform(0.05, 0.95, (4, 3)))
    out = L.weighted_masked_bce(y, np.ones((4, 3)), p, cfg_plain())
    expected = L.bce(Tensor(y), p).data.mean()
    npt.assert_allclose(out.item(), expected, rtol=1e-12)


def test_fully_masked_sample_equals_dropping_it():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, (3, 4)).astype(float)
    p_all = rng.uniform(0.1, 0.9, (3, 4))
    mask = np.ones((3, 4))
    mask[1, :] = 0.0
    cfg = cfg_plain(weights=[1.0, 2.0, 0.5, 1.5])
    masked = L.weighted_masked_bce(y, mask, Tensor(p_all), cfg).item()
    kept = [0, 2]
    dropped = L.weighted_masked_bce(y[kept], np.ones((2, 4)),
                                    Tensor(p_all[kept]), cfg).item()
    npt.assert_allclose(masked, dropped, rtol=1e-12)


def test_all_masked_raises():
    with pytest.raises(EmptyBatchError):
        L.weighted_masked_bce([[1.0]], [[0.0]], Tensor([[0.5]]), cfg_plain())


def test_masked_entries_have_exactly_zero_gradient():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, (3, 4)).astype(float)
    mask = rng.integers(0, 2, (3, 4)).astype(float)
    mask[0, 0] = 1.0  # keep at least one annotated entry
    p = Tensor(rng.uniform(0.1, 0.9, (3, 4)), requires_grad=True)
    cfg = LossConfig(weights="uniform", dice_weight=1.0,
                     label_smoothing=0.1).validate()
    loss, _ = L.total_loss(y, mask, p, cfg)
    T.backward(loss)
    assert (p.grad[mask == 0.0] == 0.0).all()
    assert (p.grad[mask == 1.0] != 0.0).any()


def test_doubling_weights_doubles_bce():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, (4, 3)).astype(float)
    p = Tensor(rng.uniform(0.1, 0.9, (4, 3)))
    w = [0.5, 1.0, 2.0]
    one = L.weighted_masked_bce(y, np.ones((4, 3)), p, cfg_plain(weights=w)).item()
    two = L.weighted_masked_bce(y, np.ones((4, 3)), p,
                                cfg_plain(weights=[2 * x for x in w])).item()
    npt.assert_allclose(two, 2.0 * one, rtol=1e-12)


# ---------------------------------------------------------------------------
# frequency weights
# ---------------------------------------------------------------------------


def test_frequency_weights_equal_rates_give_ones():
    npt.assert_allclose(L.frequency_weights([0.3, 0.3, 0.3]), 1.0, atol=1e-15)


def test_frequency_weights_example():
    npt.assert_allclose(L.frequency_weights([0.1, 0.4]), [1.6, 0.4], atol=1e-12)


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=10))
@settings(max_examples=100, deadline=None)
def test_frequency_weights_sum_to_label_count(rates):
    w = L.frequency_weights(rates)
    npt.assert_allclose(w.sum(), len(rates), rtol=1e-9)
    assert (w > 0).all()


def test_frequency_weights_rejects_bad_rates():
    with pytest.raises(ValueError):
        L.frequency_weights([0.5, 1.0])
    with pytest.raises(ValueError):
        L.frequency_weights([0.0, 0.5])


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------


def test_dice_perfect_binary_overlap_is_zero():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = L.dice_loss(y, np.ones_like(y), Tensor(y.copy()),
                      cfg_plain(dice_weight=1.0))
    npt.assert_allclose(out.item(), 0.0, atol=1e-15)


def test_dice_worst_case_fixture():
    out = L.dice_loss([[1.0]], [[1.0]], Tensor([[0.0]]),
                      LossConfig(dice_smooth=1.0).validate())
    npt.assert_allclose(out.item(), 0.5, atol=1e-15)


def test_dice_range():
    rng = np.random.default_rng(4)
    for _ in range(20):
        y = rng.integers(0, 2, (5, 3)).astype(float)
        p = Tensor(rng.uniform(0, 1, (5, 3)))
        v = L.dice_loss(y, np.ones((5, 3)), p, cfg_plain()).item()
        assert 0.0 <= v < 1.0


def test_dice_excludes_unannotated_labels():
    y = np.array([[1.0, 1.0], [1.0, 0.0]])
    mask = np.array([[1.0, 0.0], [1.0, 0.0]])
    p = Tensor(np.array([[1.0, 0.3], [1.0, 0.9]]))
    out = L.dice_loss(y, mask, p, cfg_plain()).item()
    # only label 0 participates and it is a perfect match
    npt.assert_allclose(out, 0.0, atol=1e-15)
    with pytest.raises(EmptyBatchError):
        L.dice_loss(y, np.zeros_like(mask), p, cfg_plain())


# ---------------------------------------------------------------------------
# label smoothing
# ---------------------------------------------------------------------------


def test_smooth_labels_values():
    out = L.smooth_labels(np.array([1.0, 0.0]), 0.1)
    npt.assert_allclose(out.data, [0.95, 0.05], atol=1e-15)
    ident = L.smooth_labels(np.array([1.0, 0.0]), 0.0)
    npt.assert_array_equal(ident.data, [1.0, 0.0])
    with pytest.raises(ValueError):
        L.smooth_labels(np.array([1.0]), 0.5)


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------


def test_total_reduces_to_mean_bce():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 2, (3, 4)).astype(float)
    p = Tensor(rng.uniform(0.1, 0.9, (3, 4)))
    total, parts = L.total_loss(y, np.ones((3, 4)), p, cfg_plain())
    expected = L.bce(Tensor(y), p).data.mean()
    npt.assert_allclose(total.item(), expected, rtol=1e-12)
    assert parts["dice"] == 0.0


def test_total_perfect_predictions_near_zero():
    y = np.array([[1.0, 0.0]])
    p = Tensor(np.array([[1.0 - 1e-13, 1e-13]]))
    total, _ = L.total_loss(y, np.ones((1, 2)), p,
                            LossConfig(dice_weight=1.0).validate())
    assert total.item() < 1e-10


def test_total_matches_scalar_recomputation():
    rng = np.random.default_rng(6)
    y = rng.integers(0, 2, (2, 3)).astype(float)
    mask = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    p_arr = rng.uniform(0.1, 0.9, (2, 3))
    cfg = LossConfig(weights=[1.5, 0.5, 1.0], dice_weight=0.7,
                     dice_smooth=1.0, label_smoothing=0.1).validate()
    total, parts = L.total_loss(y, mask, Tensor(p_arr), cfg)

    # independent scalar-by-scalar recomputation
    eps = cfg.label_smoothing
    w = [1.5, 0.5, 1.0]
    acc, cnt = 0.0, 0
    for b in range(2):
        for t in range(3):
            if mask[b, t] == 0:
                continue
            ys = y[b, t] * (1 - eps) + eps / 2
            pv = p_arr[b, t]
            acc += w[t] * -(ys * math.log(pv) + (1 - ys) * math.log(1 - pv))
            cnt += 1
    bce_ref = acc / cnt
    dice_terms = []
    for t in range(3):
        num, den = 0.0, 0.0
        if mask[:, t].sum() == 0:
            continue
        for b in range(2):
            if mask[b, t] == 1:
                num += p_arr[b, t] * y[b, t]
                den += p_arr[b, t] ** 2 + y[b, t] ** 2
        dice_terms.append((2 * num + 1.0) / (den + 1.0))
    dice_ref = 1.0 - sum(dice_terms) / len(dice_terms)
    npt.assert_allclose(total.item(), bce_ref + 0.7 * dice_ref, rtol=1e-12)
    npt.assert_allclose(parts["bce"], bce_ref, rtol=1e-12)
    npt.assert_allclose(parts["dice"], dice_ref, rtol=1e-12)


def test_total_loss_gradcheck():
    rng = np.random.default_rng(7)
    y = rng.integers(0, 2, (3, 4)).astype(float)
    mask = np.ones((3, 4))
    mask[2, 1] = 0.0
    cfg = LossConfig(weights=[1.0, 2.0, 0.5, 1.0], dice_weight=0.5,
                     label_smoothing=0.05).validate()
    p0 = Tensor(rng.uniform(0.2, 0.8, (3, 4)))

    def f(t):
        total, _ = L.total_loss(y, mask, t, cfg)
        return total

    assert gc.gradcheck(f, p0) < 1e-6


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(dice_weight=-1.0).validate()
    with pytest.raises(ValueError):
        LossConfig(dice_smooth=0.0).validate()
    with pytest.raises(ValueError):
        LossConfig(label_smoothing=0.5).validate()
    with pytest.raises(ValueError):
        LossConfig(clamp_p=0.0).validate()
    with pytest.raises(ValueError):
        cfg_plain(weights=[1.0, -1.0]).resolved_weights(2)
