"""AdamW with decoupled weight decay, grouped learning rates, and cosine annealing."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .autodiff import Tensor


class NonFiniteGradientError(FloatingPointError):
    """A parameter gradient contains NaN or Inf; the step was not applied."""


def lr_at(t: float, base_lr: float, total_steps: int, min_lr: float = 0.0) -> float:
    """Cosine annealing from ``base_lr`` at t=0 to ``min_lr`` at t=total_steps."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    t = min(max(t, 0), total_steps)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t / total_steps))


class CosineSchedule:
    def __init__(self, base_lrs: dict[str, float], total_steps: int, min_lr: float = 0.0):
        self.base_lrs = dict(base_lrs)
        self.total_steps = int(total_steps)
        self.min_lr = float(min_lr)
        self.t = 0

    def lrs(self, t: int | None = None) -> dict[str, float]:
        t = self.t if t is None else t
        return {g: lr_at(t, base, self.total_steps, self.min_lr) for g, base in self.base_lrs.items()}

    def advance(self) -> None:
        self.t += 1

    def state(self) -> dict:
        return {"t": self.t, "total_steps": self.total_steps, "min_lr": self.min_lr, "base_lrs": self.base_lrs}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.total_steps = int(state["total_steps"])
        self.min_lr = float(state["min_lr"])
        self.base_lrs = {k: float(v) for k, v in state["base_lrs"].items()}


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Each parameter belongs to a group (``group_of(name)``) whose learning rate
    is passed to :meth:`step`.  Parameters whose ``grad`` is None are left
    completely untouched, including weight decay, so heads of inactive
    subtasks stay bit-identical.  Moment estimates and bias-correction step
    counts are kept per parameter.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        group_of: Callable[[str], str],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.group_of = group_of
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.steps = {k: 0 for k in params}
        self.step_count = 0

    def step(self, lrs: dict[str, float]) -> None:
        live = {k: p for k, p in self.params.items() if p.grad is not None}
        for name, p in live.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}; step aborted")
        for name, p in live.items():
            lr = lrs[self.group_of(name)]
            dt = p.data.dtype
            if self.weight_decay:
                p.data *= dt.type(1.0 - lr * self.weight_decay)
            self.steps[name] += 1
            n = self.steps[name]
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= dt.type(self.beta1)
            m += dt.type(1.0 - self.beta1) * g
            v *= dt.type(self.beta2)
            v += dt.type(1.0 - self.beta2) * g * g
            m_hat = m / dt.type(1.0 - self.beta1**n)
            v_hat = v / dt.type(1.0 - self.beta2**n)
            p.data -= dt.type(lr) * m_hat / (np.sqrt(v_hat) + dt.type(self.eps))
        self.step_count += 1

    def hyperparameters(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "weight_decay": self.weight_decay}
