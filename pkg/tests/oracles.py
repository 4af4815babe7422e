"""Deliberately naive reference implementations used to check the metrics."""

from __future__ import annotations

import math

import numpy as np


def dsc_loop(a, b) -> float:
    inter = sa = sb = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            sa += bool(a[i, j])
            sb += bool(b[i, j])
            inter += bool(a[i, j]) and bool(b[i, j])
    return 1.0 if sa + sb == 0 else 2 * inter / (sa + sb)


def boundary_loop(m) -> list[tuple[int, int]]:
    h, w = m.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            if any(not (0 <= r < h and 0 <= c < w) or not m[r, c] for r, c in nbrs):
                pts.append((i, j))
    return pts


def hausdorff_all_pairs(a, b) -> float:
    pa, pb = boundary_loop(a), boundary_loop(b)
    if not pa and not pb:
        return 0.0
    if not pa or not pb:
        return math.hypot(*a.shape)

    def directed(src, dst):
        return max(min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in dst) for p in src)

    return max(directed(pa, pb), directed(pb, pa))


def auc_pairs(scores, positive) -> float:
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def auc_macro_pairs(probs, labels) -> float:
    vals = []
    for c in range(probs.shape[1]):
        positive = [int(y) == c for y in labels]
        if all(positive) or not any(positive):
            continue
        vals.append(auc_pairs(list(probs[:, c]), positive))
    return sum(vals) / len(vals) if vals else 0.5


def f1_macro_loop(y_true, y_pred, k) -> float:
    total = 0.0
    for c in range(k):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        total += 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    return total / k


def mcc_onehot_covariance(y_true, y_pred, k) -> float:
    """Gorodkin's R_K: correlation of one-hot truth and prediction matrices."""
    x = np.eye(k)[np.asarray(y_pred)]
    y = np.eye(k)[np.asarray(y_true)]
    xc, yc = x - x.mean(axis=0), y - y.mean(axis=0)
    cov_xy = float((xc * yc).sum())
    cov_xx = float((xc * xc).sum())
    cov_yy = float((yc * yc).sum())
    if cov_xx == 0 or cov_yy == 0:
        return 0.0
    return cov_xy / math.sqrt(cov_xx * cov_yy)


def iou_raster(a, b, res=128) -> float:
    """IoU by counting cells of a res x res grid over the unit square."""

    def cells(box):
        cx, cy, w, h = box
        x0, x1 = round((cx - w / 2) * res), round((cx + w / 2) * res)
        y0, y1 = round((cy - h / 2) * res), round((cy + h / 2) * res)
        return {(i, j) for i in range(y0, y1) for j in range(x0, x1)}

    ca, cb = cells(a), cells(b)
    union = len(ca | cb)
    return len(ca & cb) / union if union else 0.0


def mre_loop(pred_px, gt_px) -> float:
    total = 0.0
    for (px, py), (gx, gy) in zip(pred_px, gt_px):
        total += math.sqrt((px - gx) ** 2 + (py - gy) ** 2)
    return total / len(gt_px)
