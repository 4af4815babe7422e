import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mhmtl import autodiff as ad
from mhmtl.autodiff import Tensor
from mhmtl.data import collate, generate, resize_to_model
from mhmtl.losses import (
    BatchError,
    LossConfig,
    ce_loss,
    composite,
    detection_cells,
    detection_loss,
    dice_loss,
    keypoint_mse,
    negative_objectness,
    one_hot,
)
from mhmtl.tasks import TaskSpec

# -- dice -------------------------------------------------------------------


def test_dice_perfect_one_hot():
    target = np.random.default_rng(0).integers(0, 3, size=(2, 8, 8))
    assert dice_loss(Tensor(one_hot(target, 3, dtype=np.float64)), target).item() <= 1e-5


def test_dice_uniform_half_closed_form():
    p, eps = 36, 1e-6
    probs = Tensor(np.full((1, 2, 6, 6), 0.5))
    expected = 1 - (2 * 0.5 * p + eps) / (p + 0.5 * p + eps)
    value = dice_loss(probs, np.ones((1, 6, 6), int)).item()
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(1 / 3, abs=1e-6)


def test_dice_empty_foreground_degenerates_to_zero():
    probs = np.zeros((1, 2, 4, 4))
    probs[:, 0] = 1.0
    assert dice_loss(Tensor(probs), np.zeros((1, 4, 4), int)).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_symmetric_under_foreground_relabel():
    rng = np.random.default_rng(2)
    probs = ad.softmax(Tensor(rng.normal(size=(2, 3, 5, 5))), axis=1).data
    target = rng.integers(0, 3, size=(2, 5, 5))
    swapped_probs = probs[:, [0, 2, 1]]
    swapped_target = np.choose(target, [0, 2, 1])
    assert dice_loss(Tensor(probs), target).item() == pytest.approx(
        dice_loss(Tensor(swapped_probs), swapped_target).item(), abs=1e-12
    )


def test_dice_matches_direct_summation():
    rng = np.random.default_rng(3)
    probs = ad.softmax(Tensor(rng.normal(size=(3, 4, 5, 5))), axis=1).data
    target = rng.integers(0, 4, size=(3, 5, 5))
    eps = 1e-6
    terms = []
    for n in range(3):
        for c in range(1, 4):
            inter = denom = 0.0
            for i in range(5):
                for j in range(5):
                    y = 1.0 if target[n, i, j] == c else 0.0
                    inter += probs[n, c, i, j] * y
                    denom += probs[n, c, i, j] + y
            terms.append(1 - (2 * inter + eps) / (denom + eps))
    assert dice_loss(Tensor(probs), target).item() == pytest.approx(np.mean(terms), abs=1e-12)


# -- cross-entropy ----------------------------------------------------------


def test_ce_uniform_is_ln_k():
    assert abs(ce_loss(Tensor(np.zeros((5, 4))), np.arange(5) % 4).item() - math.log(4)) < 1e-6


def test_ce_confident_correct():
    logits = np.zeros((3, 4))
    target = np.array([1, 3, 0])
    logits[np.arange(3), target] = 20.0
    assert ce_loss(Tensor(logits), target).item() < 1e-6


def test_ce_matches_direct_summation():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n, k = rng.integers(1, 6), rng.integers(2, 6)
        z = rng.normal(scale=3, size=(n, k))
        t = rng.integers(0, k, size=n)
        ref = 0.0
        for row in range(n):
            denom = sum(math.exp(v) for v in z[row])
            ref -= math.log(math.exp(z[row, t[row]]) / denom)
        assert ce_loss(Tensor(z), t).item() == pytest.approx(ref / n, rel=1e-12)


def test_ce_label_out_of_range():
    with pytest.raises(BatchError):
        ce_loss(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# -- keypoints --------------------------------------------------------------


def test_keypoint_exact_is_zero():
    p = np.random.default_rng(0).uniform(size=(2, 4))
    assert keypoint_mse(Tensor(p), p).item() == 0.0


def test_keypoint_single_corner_case():
    assert keypoint_mse(Tensor(np.zeros((1, 2))), np.ones((1, 2))).item() == 2.0


def test_keypoint_matches_hand_sum():
    rng = np.random.default_rng(5)
    p, t = rng.uniform(size=(3, 4)), rng.uniform(size=(3, 4))
    ref = np.mean([sum((p[n, 2 * k] - t[n, 2 * k]) ** 2 + (p[n, 2 * k + 1] - t[n, 2 * k + 1]) ** 2 for k in range(2)) / 2 for n in range(3)])
    assert keypoint_mse(Tensor(p), t).item() == pytest.approx(ref, abs=1e-15)


# -- detection ----------------------------------------------------------------


def _perfect(targets, gh=8, gw=8, logit=20.0, seed=0):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(size=(len(targets), 5, gh, gw))
    pred[:, 4] = rng.normal(scale=5, size=(len(targets), gh, gw))
    rows, cols = detection_cells(targets, gh, gw)
    for n, (i, j) in enumerate(zip(rows, cols)):
        pred[n, :4, i, j] = targets[n]
        pred[n, 4, i, j] = logit
    return pred, rows, cols


def test_detection_perfect_below_threshold():
    targets = np.array([[0.3, 0.6, 0.2, 0.1], [0.9, 0.05, 0.1, 0.1]])
    pred, *_ = _perfect(targets)
    assert detection_loss(Tensor(pred), targets).item() < 1e-6


def test_detection_half_objectness_is_ln2():
    targets = np.array([[0.5, 0.5, 0.25, 0.25]])
    pred, *_ = _perfect(targets, logit=0.0)
    assert detection_loss(Tensor(pred), targets).item() == pytest.approx(math.log(2), abs=1e-12)


def test_detection_box_error_weighted_by_lambda():
    targets = np.array([[0.5, 0.5, 0.25, 0.25]])
    pred, rows, cols = _perfect(targets)
    pred[0, :4, rows[0], cols[0]] += 0.1
    assert detection_loss(Tensor(pred), targets).item() == pytest.approx(0.8, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(
    noise=arrays(np.float64, (2, 5, 8, 8), elements=st.floats(-50, 50)),
    centres=arrays(np.float64, (2, 4), elements=st.floats(0, 0.99)),
)
def test_detection_ignores_other_cells(noise, centres):
    pred, rows, cols = _perfect(centres, logit=1.5)
    base = detection_loss(Tensor(pred), centres).item()
    mask = np.ones(pred.shape, bool)
    mask[np.arange(2), :, rows, cols] = False
    perturbed = np.where(mask, noise, pred)
    assert detection_loss(Tensor(perturbed), centres).item() == base


def test_detection_gradient_only_at_target_cell():
    targets = np.array([[0.2, 0.7, 0.3, 0.3]])
    pred = Tensor(np.random.default_rng(1).uniform(size=(1, 5, 4, 4)), requires_grad=True)
    ad.backward(detection_loss(pred, targets))
    (i,), (j,) = detection_cells(targets, 4, 4)
    g = pred.grad.copy()
    assert np.any(g[0, :, i, j])
    g[0, :, i, j] = 0
    assert not np.any(g)


def test_detection_rejects_missing_targets():
    with pytest.raises(BatchError):
        detection_loss(Tensor(np.zeros((1, 5, 4, 4))), np.zeros((0, 4)))
    with pytest.raises(BatchError):
        detection_loss(Tensor(np.zeros((2, 5, 4, 4))), np.zeros((1, 4)))


def test_negative_objectness_term():
    targets = np.array([[0.1, 0.1, 0.2, 0.2]])
    pred = np.zeros((1, 5, 2, 2))
    assert negative_objectness(Tensor(pred), targets).item() == pytest.approx(math.log(2))
    pred[0, 4] = -30.0
    assert negative_objectness(Tensor(pred), targets).item() < 1e-12


# -- value ranges --------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(
    z=arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-20, 20)),
    t=arrays(np.int64, (2, 4, 4), elements=st.integers(0, 2)),
)
def test_dice_in_unit_interval(z, t):
    v = dice_loss(ad.softmax(Tensor(z), axis=1), t).item()
    assert -1e-9 <= v <= 1 + 1e-9


@settings(max_examples=40, deadline=None)
@given(
    z=arrays(np.float64, (3, 4), elements=st.floats(-30, 30)),
    t=arrays(np.int64, (3,), elements=st.integers(0, 3)),
    p=arrays(np.float64, (3, 4), elements=st.floats(0, 1)),
    q=arrays(np.float64, (3, 4), elements=st.floats(0, 1)),
)
def test_losses_non_negative(z, t, p, q):
    assert ce_loss(Tensor(z), t).item() >= 0
    assert keypoint_mse(Tensor(p), q).item() >= 0
    pred = np.zeros((3, 5, 4, 4))
    pred[:, :4] = p[:, :, None, None]
    assert detection_loss(Tensor(pred), q).item() >= 0


# -- dispatch ------------------------------------------------------------------


def _batch(task, n=3, seed=0):
    return collate([resize_to_model(s, (64, 64)) for s in generate(seed, task, n, size_range=(64, 80))])


def test_composite_dispatches_by_kind():
    rng = np.random.default_rng(0)
    seg = _batch(TaskSpec("s", "Segmentation", num_classes=2))
    out = Tensor(rng.normal(size=(3, 2, 64, 64)))
    assert composite(seg, out).item() == dice_loss(ad.softmax(out, axis=1), seg.targets).item()
    cls = _batch(TaskSpec("c", "Classification", num_classes=3))
    out = Tensor(rng.normal(size=(3, 3)))
    assert composite(cls, out).item() == ce_loss(out, cls.targets).item()
    kp = _batch(TaskSpec("k", "Regression", num_keypoints=2))
    out = Tensor(rng.uniform(size=(3, 4)))
    assert composite(kp, out).item() == keypoint_mse(out, kp.targets).item()
    det = _batch(TaskSpec("d", "Detection"))
    out = Tensor(rng.uniform(size=(3, 5, 16, 16)))
    assert composite(det, out).item() == detection_loss(out, det.targets).item()
    with_neg = composite(det, out, LossConfig(det_neg_weight=1.0)).item()
    assert with_neg == pytest.approx(detection_loss(out, det.targets).item() + negative_objectness(out, det.targets).item())


def test_composite_rejects_mixed_batch():
    a = [resize_to_model(s, (64, 64)) for s in generate(0, TaskSpec("a", "Classification", num_classes=2), 1)]
    b = [resize_to_model(s, (64, 64)) for s in generate(0, TaskSpec("b", "Classification", num_classes=2), 1)]
    with pytest.raises(BatchError, match="mixes"):
        composite(a + b, Tensor(np.zeros((2, 2))))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(det_lambda=0)
    with pytest.raises(ValueError):
        LossConfig(det_neg_weight=-1)
