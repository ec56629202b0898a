"""Momentum SGD with a cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np


def cosine_lr(lr0: float, t: float, total: float) -> float:
    """lr0 * (1 + cos(pi * t / T)) / 2, no restarts."""
    if total <= 0:
        return lr0
    t = min(max(t, 0.0), total)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


class SGD:
    """Heavy-ball SGD: v <- mu * v + (g + wd * p); p <- p - lr * v.

    Weight decay only touches names listed in ``decay``; step sizes and
    batch-norm affine parameters are exempt.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float, decay=()) -> None:
        decay = set(decay)
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            if self.weight_decay and name in decay:
                g = g + self.weight_decay * p
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] = p - lr * v

    def state(self) -> dict:
        return {k: v.copy() for k, v in self.velocity.items()}

    def load(self, state: dict) -> None:
        self.velocity = {k: np.asarray(v, dtype=np.float64).copy() for k, v in state.items()}


def sgd_step(params: dict, grads: dict, lr0: float, t: float, total: float, opt: SGD, decay=()) -> float:
    """One update at fractional epoch ``t`` of ``total``; returns the rate used."""
    lr = cosine_lr(lr0, t, total)
    opt.step(params, grads, lr, decay)
    return lr
