"""Straight-through surrogates for weight and activation quantizers.

The weight path is ``w -> wbar_n = clip(round(w / s_w)) -> wbar_i = floor(wbar_n / 2^(n-i))``
with ``s_i = s_w * 2^(n-i)``. The rounding and flooring are treated as
identity in the backward pass, so ``d wbar_i / d w = 1 / s_i`` wherever
``w / s_w`` lies inside the top quantizer's range.

Integer-valued tensors flow through the tape as float64 arrays; products and
sums of small integers are exact in double precision, which keeps the
training forward identical to the integer inference kernels.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from ..quant import quant_range, round_clip
from .tape import Tape, Var


def ste_weight_grad(upstream, s_i, w, s_n, top_bits: int):
    """d L / d w from d L / d wbar_i: upstream / s_i, zero where w / s_n is clipped."""
    qn, qp = quant_range(top_bits, True)
    r = np.asarray(w) / s_n
    return np.where((r >= -qn) & (r <= qp), np.asarray(upstream) / s_i, 0.0)


def lsq_branch(v, s, vbar, qn: int, qp: int, offset: float = 0.0):
    """Per-element d(vbar + offset) * s / d s under the straight-through rule.

    Interior: vbar - v/s; below range: -qn; above range: qp. The case is
    picked from the pre-clip value v/s. ``offset`` is added to every branch.
    """
    r = np.asarray(v) / s
    inner = np.asarray(vbar) - r
    return np.where(r < -qn, -qn, np.where(r > qp, qp, inner)) + offset


def step_size_grad(upstream, w, s_i, wbar_i, level: int, n: int, basic_bits: int = 2, offset: float = 0.0, scale: float = 1.0) -> float:
    """Contribution of one level to d L / d s_w.

    ``upstream`` is d L / d wbar_i. Each element contributes
    ``upstream / s_i * branch``; the sum is chained to the source step by
    ``d s_i / d s_w = 2^(n - i)`` and multiplied by the gradient scale.
    """
    qn, qp = quant_range(basic_bits + level, True)
    per = np.asarray(upstream) / s_i * lsq_branch(w, s_i, wbar_i, qn, qp, offset)
    return float(per.sum()) * 2.0 ** (n - level) * scale


def act_step_grad(upstream, x, s_a, abar, bits: int, scale: float = 1.0) -> float:
    """d L / d s_a from d L / d abar for an unsigned activation quantizer."""
    _, qp = quant_range(bits, False)
    return float((np.asarray(upstream) / s_a * lsq_branch(x, s_a, abar, 0, qp)).sum()) * scale


def act_input_grad(upstream, x, s_a, bits: int):
    _, qp = quant_range(bits, False)
    r = np.asarray(x) / s_a
    return np.where((r >= 0) & (r <= qp), np.asarray(upstream) / s_a, 0.0)


def weight_grad_scale(count: int, top_bits: int) -> float:
    return 1.0 / np.sqrt(count * quant_range(top_bits, True)[1])


def act_grad_scale(features: int, bits: int) -> float:
    return 1.0 / np.sqrt(features * quant_range(bits, False)[1])


def quantize_weight_levels(w: np.ndarray, s_w: float, n: int, basic_bits: int = 2) -> list[np.ndarray]:
    """Integer weights for every level 0..n, as float64 arrays."""
    qn, qp = quant_range(basic_bits + n, True)
    top = round_clip(w, s_w, qn, qp)
    return [np.floor(top / 2.0 ** (n - i)) for i in range(n + 1)]


def quant_weight(t: Tape, w: Var, s_w: Var, n: int, level: int, z: float, basic_bits: int = 2, scale: float = 1.0, levels=None) -> Var:
    """Node whose value is wbar_level; ``levels`` may pass precomputed integers."""
    sw = float(s_w.value)
    s_i = sw * 2.0 ** (n - level)
    wbar = (levels if levels is not None else quantize_weight_levels(w.value, sw, n, basic_bits))[level]
    top_bits = basic_bits + n

    def back(g):
        gw = ste_weight_grad(g, s_i, w.value, sw, top_bits)
        gs = step_size_grad(g, w.value, s_i, wbar, level, n, basic_bits, z, scale)
        return gw, np.asarray(gs)

    return t.record(wbar, (w, s_w), back)


def quant_act(t: Tape, x: Var, s_a: Var, bits: int, scale: float = 1.0) -> Var:
    sa = float(s_a.value)
    _, qp = quant_range(bits, False)
    abar = round_clip(x.value, sa, 0, qp)

    def back(g):
        gx = act_input_grad(g, x.value, sa, bits) if x.needs_grad else None
        return gx, np.asarray(act_step_grad(g, x.value, sa, abar, bits, scale))

    return t.record(abar, (x, s_a), back)


def bit_carrier(t: Tape, r: Var, base: np.ndarray, s_i: float) -> Var:
    """Next-level integers 2*base + 1[r >= 0]; the sign mapping passes gradients as 1 / s_i."""
    value = 2.0 * base + (r.value >= 0)
    return t.record(value, (r,), lambda g: (g / s_i,))


def int_conv(t: Tape, a: Var, wq: Var, z: float, s_w: float, s_a: float, stride: int, pad: int) -> Var:
    """(sum(wbar * abar) + z * S(abar)) * s_w * s_a over each receptive field."""
    av, wv = a.value, wq.value
    o, c, k, _ = wv.shape
    cols, oh, ow = kernels.im2col(av, k, stride, pad)
    wmat = wv.reshape(o, -1)
    acc = cols @ wmat.T
    sums = cols.sum(axis=1, keepdims=True)
    y = kernels.cols_to_nchw(kernels.rescale(acc, sums, z, s_w, s_a), av.shape[0], oh, ow)
    scale = s_w * s_a

    def back(g):
        gc = kernels.nchw_to_cols(g)
        gw = (gc.T @ cols).reshape(wv.shape) * scale if wq.needs_grad else None
        ga = kernels.col2im(gc @ (wmat + z), av.shape, k, stride, pad) * scale if a.needs_grad else None
        return ga, gw

    return t.record(y, (a, wq), back)


def int_linear(t: Tape, a: Var, wq: Var, z: float, s_w: float, s_a: float) -> Var:
    av, wv = a.value, wq.value
    acc = av @ wv.T
    sums = av.sum(axis=1, keepdims=True)
    y = kernels.rescale(acc, sums, z, s_w, s_a)
    scale = s_w * s_a
    return t.record(y, (a, wq), lambda g: ((g @ (wv + z)) * scale, (g.T @ av) * scale))
