"""Task losses and the per-batch dispatch.

All losses take model outputs as :class:`~mhmtl.autodiff.Tensor` and plain
numpy targets, and return a scalar Tensor averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .model import encode_detection_target
from .tasks import Kind


class BatchError(ValueError):
    """Batch violates a loss precondition (mixed tasks, missing targets...)."""


@dataclass(frozen=True)
class LossConfig:
    dice_eps: float = 1e-6
    det_lambda: float = 8.0
    # weight of BCE(objectness, 0) on non-centre cells; 0 keeps the
    # centre-cell-only objective
    det_neg_weight: float = 0.0

    def __post_init__(self):
        if self.dice_eps <= 0 or self.det_lambda <= 0:
            raise ValueError("dice_eps and det_lambda must be positive")
        if self.det_neg_weight < 0:
            raise ValueError("det_neg_weight must be non-negative")


DEFAULT = LossConfig()


def one_hot(labels: np.ndarray, k: int, axis: int = 1, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise BatchError(f"label values must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    eye = np.eye(k, dtype=dtype)[labels]  # [..., K]
    return np.moveaxis(eye, -1, axis)


def dice_loss(probs: Tensor, target: np.ndarray, eps: float = DEFAULT.dice_eps) -> Tensor:
    """Soft Dice over foreground classes 1..K-1, averaged over classes then images.

    probs: [N,K,H,W] softmax probabilities; target: [N,H,W] class indices.
    """
    if probs.ndim != 4:
        raise ShapeError(f"dice_loss expects probs [N,K,H,W], got {probs.shape}")
    n, k, h, w = probs.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"dice target shape {target.shape} != {(n, h, w)}")
    y = one_hot(target, k, dtype=probs.dtype)[:, 1:]
    fg = probs[:, 1:]
    inter = ad.tsum(fg * y, axis=(2, 3))  # [N, K-1]
    denom = ad.tsum(fg, axis=(2, 3)) + y.sum(axis=(2, 3)) + eps
    # 1 - (2I + eps) / denom, written with elementwise ops only
    ratio = (inter * 2.0 + eps) * _reciprocal(denom)
    return ad.mean(1.0 - ratio)


def _reciprocal(x: Tensor) -> Tensor:
    inv = 1.0 / x.data
    return ad._make(inv, (x,), lambda g: (-g * inv * inv,), "reciprocal")


def ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target] (log clamped at 1e-12)."""
    if logits.ndim != 2:
        raise ShapeError(f"ce_loss expects logits [N,K], got {logits.shape}")
    n, k = logits.shape
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if target.shape != (n,):
        raise ShapeError(f"ce target needs {n} labels, got {target.shape}")
    y = one_hot(target, k, axis=1, dtype=logits.dtype)
    logp = ad.log(ad.softmax(logits, axis=1))
    return ad.mean(ad.tsum(logp * y, axis=1)) * -1.0


def keypoint_mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """(1/M) * sum_k ||pred_k - target_k||^2 per image, averaged over the batch.

    Both arrays hold normalized coordinates laid out as x0, y0, x1, y1, ...
    """
    target = np.asarray(target, dtype=pred.dtype)
    if pred.ndim != 2 or pred.shape != target.shape or pred.shape[1] % 2:
        raise ShapeError(f"keypoint_mse expects matching [N,2M] arrays, got {pred.shape} and {target.shape}")
    m = pred.shape[1] // 2
    sq = ad.square(pred - target)
    return ad.mean(ad.tsum(sq, axis=1)) * (1.0 / m)


def detection_cells(targets: np.ndarray, grid_h: int, grid_w: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = [], []
    for cx, cy, *_ in targets:
        i, j = encode_detection_target(float(cx), float(cy), grid_h, grid_w)
        rows.append(i)
        cols.append(j)
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)


def detection_loss(pred: Tensor, targets, lam: float = DEFAULT.det_lambda) -> Tensor:
    """Centre-cell detection loss.

    Only the cell containing each ground-truth centre is supervised:
    BCE(objectness, 1) + lam * mean |box - box_gt|.  The box channels of
    ``pred`` are already sigmoid-activated by the head.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size == 0:
        raise BatchError("detection_loss needs one target box per image; got none")
    if pred.ndim != 4 or pred.shape[1] != 5:
        raise ShapeError(f"detection output must be [N,5,h,w], got {pred.shape}")
    n, _, gh, gw = pred.shape
    if targets.shape != (n, 4):
        raise BatchError(f"expected {n} target boxes of 4 values, got array of shape {targets.shape}")
    rows, cols = detection_cells(targets, gh, gw)
    cell = pred[np.arange(n), :, rows, cols]  # [N, 5]
    obj = cell[:, 4]
    box = cell[:, 0:4]
    bce = ad.log(ad.sigmoid(obj)) * -1.0
    l1 = ad.mean(ad.absolute(box - targets.astype(pred.dtype)), axis=1)
    return ad.mean(bce + l1 * lam)


def negative_objectness(pred: Tensor, targets) -> Tensor:
    """Mean BCE(objectness, 0) over every cell except each image's centre cell."""
    targets = np.asarray(targets, dtype=np.float64)
    n, _, gh, gw = pred.shape
    rows, cols = detection_cells(targets, gh, gw)
    neg = np.ones((n, gh, gw), dtype=pred.dtype)
    neg[np.arange(n), rows, cols] = 0.0
    # -log(1 - sigmoid(s)) = -log(sigmoid(-s))
    bce0 = ad.log(ad.sigmoid(pred[:, 4] * -1.0)) * -1.0
    return ad.tsum(bce0 * neg) * (1.0 / neg.sum())


def composite(batch, outputs: Tensor, config: LossConfig = DEFAULT) -> Tensor:
    """Loss for a task-homogeneous batch, chosen by the batch's task kind.

    ``batch`` is a :class:`mhmtl.data.Batch` or a sequence of model-space
    samples (collated here; mixed subtasks are rejected).
    """
    from .data import Batch, collate

    if not isinstance(batch, Batch):
        batch = collate(batch)
    kind = batch.task.kind
    if kind is Kind.SEGMENTATION:
        return dice_loss(ad.softmax(outputs, axis=1), batch.targets, eps=config.dice_eps)
    if kind is Kind.CLASSIFICATION:
        return ce_loss(outputs, batch.targets)
    if kind is Kind.REGRESSION:
        return keypoint_mse(outputs, batch.targets)
    loss = detection_loss(outputs, batch.targets, lam=config.det_lambda)
    if config.det_neg_weight > 0:
        loss = loss + negative_objectness(outputs, batch.targets) * config.det_neg_weight
    return loss
