"""Loss values at their textbook corner cases, and the evaluation metrics."""

import math

import numpy as np

from mhmtl.autodiff import Tensor
from mhmtl.losses import ce_loss, dice_loss, keypoint_mse, one_hot
from mhmtl.metrics import auc, confusion_matrix, dsc, f1_mcc, hausdorff, iou, mre

target = np.array([[[0, 1], [1, 1]]])
print("dice, perfect one-hot:", dice_loss(Tensor(one_hot(target, 2, dtype=np.float64)), target).item())
print("CE, uniform logits K=4:", ce_loss(Tensor(np.zeros((3, 4))), np.array([0, 1, 2])).item(), "ln 4 =", math.log(4))
print("keypoint MSE, all-zero vs all-one:", keypoint_mse(Tensor(np.zeros((1, 2))), np.ones((1, 2))).item())

a = np.zeros((5, 5), bool)
b = np.zeros((5, 5), bool)
a[0, 0] = b[3, 4] = True
print("Hausdorff across a 3-4-5 triangle:", hausdorff(a, b), " DSC:", dsc(a, b))

print("IoU of half-overlapping boxes:", iou((0.5, 0.5, 0.2, 0.2), (0.6, 0.5, 0.2, 0.2)))
y = np.array([0, 1, 2, 2, 1, 0])
p = np.array([0, 1, 2, 1, 1, 0])
f1, mcc = f1_mcc(confusion_matrix(y, p, 3))
print(f"macro F1 {f1:.3f}  MCC {mcc:.3f}  AUC {auc(np.eye(3)[p] * 0.8 + 0.1, y):.3f}")
print("MRE in pixels:", mre(np.array([[0.5, 0.5]]), np.array([[103.0, 104.0]]), (200, 200)))
