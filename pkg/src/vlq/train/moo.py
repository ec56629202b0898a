"""Combining per-precision losses: fixed equal weights or min-norm weights."""
from __future__ import annotations

import numpy as np

from ..errors import DivergenceError, InvalidArgument
from . import ops
from .tape import Tape


def combine_us(losses) -> tuple[float, np.ndarray]:
    """Equal-weight scalarization: alpha_i = 1/(n+1)."""
    losses = np.asarray(losses, dtype=np.float64)
    for level, v in enumerate(losses):
        if not np.isfinite(v):
            raise DivergenceError(level)
    alpha = np.full(losses.size, 1.0 / losses.size)
    return float(losses.sum() / losses.size), alpha


def solve_min_norm(grads, tol: float = 1e-6, max_iter: int = 250) -> tuple[np.ndarray, float]:
    """Minimize ||sum_i alpha_i g_i||^2 over the probability simplex.

    Frank-Wolfe on the Gram matrix with exact line search. Away steps are
    taken when they promise more decrease than the toward step, which keeps
    convergence linear when the optimum sits on a face of the simplex.
    Stops when the Frank-Wolfe duality gap drops below ``tol``.
    """
    g = np.asarray([np.ravel(v) for v in grads], dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0 or g.shape[1] == 0:
        raise InvalidArgument("need at least one non-empty gradient vector")
    if not np.isfinite(g).all():
        raise InvalidArgument("gradients must be finite")
    gram = g @ g.T
    k = gram.shape[0]
    alpha = np.full(k, 1.0 / k)
    for _ in range(max_iter):
        grad = gram @ alpha
        s = int(np.argmin(grad))
        gap_fw = alpha @ grad - grad[s]
        if gap_fw < tol:
            break
        active = np.flatnonzero(alpha > 0)
        v = int(active[np.argmax(grad[active])])
        gap_aw = grad[v] - alpha @ grad
        if gap_fw >= gap_aw:
            d = -alpha.copy()
            d[s] += 1.0
            gmax = 1.0
        else:
            d = alpha.copy()
            d[v] -= 1.0
            gmax = alpha[v] / (1.0 - alpha[v]) if alpha[v] < 1.0 else 1.0
        curv = d @ gram @ d
        step = gmax if curv <= 0 else min(max(-(grad @ d) / curv, 0.0), gmax)
        alpha = alpha + step * d
        alpha[alpha < 1e-15] = 0.0
        alpha /= alpha.sum()
    return alpha, float(alpha @ gram @ alpha)


def self_kd_loss(student_logits, teacher_logits, mode: str = "cos") -> float:
    """Distillation loss value of a student against a (constant) teacher."""
    t = Tape()
    s = t.leaf(student_logits)
    if mode == "cos":
        return float(ops.kd_cosine(t, s, teacher_logits).value)
    if mode == "kl":
        return float(ops.kd_kl(t, s, teacher_logits).value)
    raise InvalidArgument(f"unknown distillation mode {mode!r}")
