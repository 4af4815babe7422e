"""Evaluation metrics: DSC, Hausdorff, AUC, F1/MCC, IoU, MRE and the report type."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

# Primary metrics reported per category, in report order.
CATEGORY_METRICS = {
    "Segmentation": ("DSC", "HD"),
    "Classification": ("AUC", "F1", "MCC"),
    "Detection": ("IoU",),
    "Regression": ("MRE",),
}


def dsc(pred_mask, gt_mask) -> float:
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary_points(mask) -> np.ndarray:
    """(row, col) of foreground pixels touching background (4-neighbourhood) or the image edge."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return np.argwhere(m & ~interior)


def hausdorff(pred_mask, gt_mask) -> float:
    """Symmetric Hausdorff distance between mask boundaries, in pixels.

    One empty mask scores the image diagonal; two empty masks score 0.
    """
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    pa, pb = boundary_points(a), boundary_points(b)
    if len(pa) == 0 and len(pb) == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return math.hypot(*a.shape)
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


def binary_auc(scores, labels) -> float:
    """Mann-Whitney rank statistic; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scores, labels) -> float:
    """Macro one-vs-rest AUC.

    ``scores`` is [N] (binary positive-class score) or [N, K] class
    probabilities.  Classes absent from, or covering all of, ``labels`` are
    skipped; if every class is skipped the result is 0.5.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.ndim == 1:
        if labels.min() == labels.max():
            return 0.5
        return binary_auc(scores, labels == 1)
    values = []
    for c in range(scores.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            continue
        values.append(binary_auc(scores[:, c], pos))
    return float(np.mean(values)) if values else 0.5


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    """K x K counts, rows = ground truth, columns = prediction."""
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def f1_mcc(cm) -> tuple[float, float]:
    """Macro F1 and multiclass MCC from a confusion matrix."""
    cm = np.asarray(cm, dtype=np.float64)
    s = cm.sum()
    if s <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    c = tp.sum()
    t_k = cm.sum(axis=1)
    p_k = cm.sum(axis=0)
    cov_pt = c * s - float(p_k @ t_k)
    var_p = s * s - float(p_k @ p_k)
    var_t = s * s - float(t_k @ t_k)
    mcc = 0.0 if var_p == 0 or var_t == 0 else cov_pt / math.sqrt(var_p * var_t)
    return float(f1.mean()), float(mcc)


def iou(box_a, box_b) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    ax, ay, aw, ah = (float(v) for v in box_a)
    bx, by, bw, bh = (float(v) for v in box_b)
    if min(aw, ah, bw, bh) < 0:
        raise ValueError("box width/height must be non-negative")
    if (ax, ay, aw, ah) == (bx, by, bw, bh):
        return 1.0 if aw * ah > 0 else 0.0
    ix = max(0.0, min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2))
    iy = max(0.0, min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    # rounding can push identical boxes a hair above 1
    return min(1.0, inter / union) if union > 0 else 0.0


def mre(pred_norm, gt_px, orig_size) -> float:
    """Mean radial error in original-image pixels.

    pred_norm: [M,2] normalized (x, y); gt_px: [M,2] original pixels;
    orig_size: (H0, W0).
    """
    pred = np.asarray(pred_norm, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt_px, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ValueError(f"keypoint counts differ: {pred.shape[0]} vs {gt.shape[0]}")
    h0, w0 = orig_size
    return mre_px(pred * np.array([w0, h0], dtype=np.float64), gt)


def mre_px(pred_px, gt_px) -> float:
    """Mean Euclidean distance between matching [M,2] pixel keypoint arrays."""
    pred = np.asarray(pred_px, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt_px, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ValueError(f"keypoint counts differ: {pred.shape[0]} vs {gt.shape[0]}")
    return float(np.linalg.norm(pred - gt, axis=1).mean())


@dataclass
class EvalReport:
    """Per-subtask metric values plus unweighted per-category means."""

    subtasks: dict[str, dict] = field(default_factory=dict)  # id -> {"kind": ..., metric: value}

    def add(self, subtask_id: str, kind: str, values: dict[str, float]) -> None:
        self.subtasks[subtask_id] = {"kind": kind, **{k: float(v) for k, v in values.items()}}

    @property
    def category_means(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for cat, names in CATEGORY_METRICS.items():
            rows = [v for v in self.subtasks.values() if v["kind"] == cat]
            if rows:
                out[cat] = {m: float(np.mean([r[m] for r in rows])) for m in names}
        return out

    def to_text(self) -> str:
        lines = ["# category means (unweighted over subtasks)"]
        for cat, vals in self.category_means.items():
            for m, v in vals.items():
                lines.append(f"{cat}.Mean {m} = {v!r}")
        lines.append("# per subtask")
        for sid in sorted(self.subtasks):
            row = self.subtasks[sid]
            lines.append(f"subtask.{sid}.kind = {row['kind']}")
            for m in CATEGORY_METRICS[row["kind"]]:
                lines.append(f"subtask.{sid}.{m} = {row[m]!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str) -> dict[str, str]:
        """Key/value view of a serialized report."""
        out = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            key, _, value = line.partition(" = ")
            out[key.strip()] = value.strip()
        return out
