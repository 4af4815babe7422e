"""Reverse-mode autodiff on a tiny conv net, checked against finite differences."""

import numpy as np

from mhmtl import autodiff as ad
from mhmtl.autodiff import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(2, 1, 6, 6)))
w = Tensor(rng.normal(size=(3, 1, 3, 3)), requires_grad=True)
fc = Tensor(rng.normal(size=(2, 3)), requires_grad=True)


def loss_of(w_arr):
    h = ad.relu(ad.conv2d(x, Tensor(w_arr), None, padding=1))
    logits = ad.affine(ad.pool_avg_global(h), fc, Tensor(np.zeros(2)))
    return ad.tsum(ad.square(logits))


h = ad.relu(ad.conv2d(x, w, None, padding=1))
out = ad.tsum(ad.square(ad.affine(ad.pool_avg_global(h), fc, Tensor(np.zeros(2)))))
ad.backward(out)
print("loss", out.item())

# central differences on one weight
eps = 1e-5
bumped = w.data.copy()
bumped[1, 0, 1, 2] += eps
up = loss_of(bumped).item()
bumped[1, 0, 1, 2] -= 2 * eps
down = loss_of(bumped).item()
print("analytic", w.grad[1, 0, 1, 2], "numeric", (up - down) / (2 * eps))

