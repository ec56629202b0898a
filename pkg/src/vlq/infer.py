"""Integer-arithmetic inference at a chosen precision.

Quantized layers accumulate ``sum(w * a)`` over integer weights and
activations with 64-bit integer arithmetic. Compensation ``z`` is folded in
as ``z * S(a)`` where ``S(a)`` is the receptive-field activation sum, which
equals convolving ``(w + z)`` with ``a`` and costs one extra channel-summed
reduction per output location.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidArgument, ValidationError
from .model import Architecture, BNParams, HeadParams, LayeredModel, StemParams
from .quant import QTensor, QuantParams, quant_range, quantize
from .vertical import assemble, compensation


@dataclass(frozen=True)
class ActivationQuantizer:
    step_size: float
    bits: int

    def __post_init__(self):
        if not self.step_size > 0:
            raise InvalidArgument(f"activation step must be positive, got {self.step_size}")

    @property
    def params(self) -> QuantParams:
        return QuantParams(float(self.step_size), self.bits, signed=False)


def quantize_activation(a, q: ActivationQuantizer) -> QTensor:
    """Unsigned quantization; negative inputs clip to zero."""
    return quantize(a, q.params)


def accumulator_bound(w_bits: int, a_bits: int, fan_in: int) -> int:
    """Largest possible |sum(w * a)| for one output element."""
    qn, qp = quant_range(w_bits, True)
    _, ap = quant_range(a_bits, False)
    return max(qn, qp) * ap * fan_in


def _int64(q: QTensor) -> np.ndarray:
    return q.data.astype(np.int64)


_EXACT_FLOAT = 2**53


def int_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Integer matrix product with an int64 result.

    If no partial sum can reach 2**53 in magnitude, a float64 product is exact
    whatever the summation order, so the fast BLAS path gives the same
    integers as numpy's integer matmul.
    """
    bound = int(np.abs(a).max(initial=0)) * int(np.abs(b).max(initial=0)) * a.shape[-1]
    if bound < _EXACT_FLOAT:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)
    return a @ b


def conv2d_q(w: QTensor, a: QTensor, z: float, s_w: float, s_a: float, stride: int = 1, padding: int = 0):
    if w.data.ndim != 4 or a.data.ndim != 4:
        raise ValidationError("conv2d_q expects 4-D weights and activations")
    out_ch, in_ch, kh, kw = w.shape
    if kh != kw:
        raise ValidationError("only square kernels are supported")
    if a.shape[1] != in_ch:
        raise ValidationError(f"activation has {a.shape[1]} channels, weights expect {in_ch}")
    if kernels.conv_output_size(a.shape[2], kh, stride, padding) < 1:
        raise ValidationError("kernel larger than padded input")
    cols, oh, ow = kernels.im2col(_int64(a), kh, stride, padding)
    acc = int_matmul(cols, _int64(w).reshape(out_ch, -1).T)
    sums = cols.sum(axis=1, keepdims=True)
    y = kernels.rescale(acc, sums, z, s_w, s_a)
    return kernels.cols_to_nchw(y, a.shape[0], oh, ow)


def linear_q(w: QTensor, a: QTensor, z: float, s_w: float, s_a: float):
    if w.data.ndim != 2 or a.data.ndim != 2 or a.shape[1] != w.shape[1]:
        raise ValidationError(f"linear_q shape mismatch: weights {w.shape}, activations {a.shape}")
    acc = int_matmul(_int64(a), _int64(w).T)
    sums = _int64(a).sum(axis=1, keepdims=True)
    return kernels.rescale(acc, sums, z, s_w, s_a)


def batchnorm(x, bn: BNParams, eps: float = kernels.BN_EPS):
    if (np.asarray(bn.var) < 0).any():
        raise ValidationError("batch-norm variance must be non-negative")
    if x.shape[1] != np.shape(bn.mean)[0]:
        raise ValidationError(f"batch-norm has {np.shape(bn.mean)[0]} channels, input has {x.shape[1]}")
    return kernels.batchnorm_eval(x, bn.mean, bn.var, bn.scale, bn.shift, eps)


@dataclass(frozen=True, eq=False)
class AssembledModel:
    """A runnable network with every quantized layer fixed at some level.

    ``levels[m]`` is layer ``m``'s number of enhance planes; uniform
    precision means all entries are equal.
    """

    arch: Architecture
    n: int
    basic_bits: int
    levels: tuple[int, ...]
    weights: tuple[QTensor, ...]
    z: tuple[float, ...]
    act: tuple[ActivationQuantizer, ...]
    bn: tuple[BNParams, ...]
    head: HeadParams
    stem: StemParams | None = None

    @property
    def bits(self) -> tuple[int, ...]:
        return tuple(self.basic_bits + k for k in self.levels)


def assemble_model(model: LayeredModel, levels) -> AssembledModel:
    m = len(model.arch.layers)
    if np.ndim(levels) == 0:
        levels = [int(levels)] * m
    levels = tuple(int(k) for k in levels)
    if len(levels) != m:
        raise InvalidArgument(f"expected {m} per-layer levels, got {len(levels)}")
    for k in levels:
        if not 0 <= k <= model.n:
            raise InvalidArgument(f"level {k} outside [0, {model.n}]")
    weights, zs, acts, bns = [], [], [], []
    for idx, k in enumerate(levels):
        w = assemble(model.stacks[idx], k)
        weights.append(w)
        zs.append(compensation(k, model.n) if model.compensate else 0.0)
        acts.append(ActivationQuantizer(float(model.act_steps[idx, k]), model.basic_bits + k))
        bns.append(model.bn[idx][k])
    return AssembledModel(
        arch=model.arch,
        n=model.n,
        basic_bits=model.basic_bits,
        levels=levels,
        weights=tuple(weights),
        z=tuple(zs),
        act=tuple(acts),
        bn=tuple(bns),
        head=model.head,
        stem=model.stem,
    )


def stem_forward(stem: StemParams, x):
    y = kernels.conv2d_float(x, stem.weight, stem.stride, stem.padding)
    y = kernels.batchnorm_eval(y, stem.bn.mean, stem.bn.var, stem.bn.scale, stem.bn.shift)
    return kernels.relu(y)


def head_forward(head: HeadParams, x, pool: str = "avg"):
    if x.ndim == 4:
        x = kernels.global_avg_pool(x) if pool == "avg" else x.reshape(x.shape[0], -1)
    return kernels.linear(x, head.weight, head.bias)


def forward(model: AssembledModel, batch, stats: list | None = None):
    """Run ``batch`` through the network and return logits.

    When ``stats`` is a list, one record per quantized layer describing the
    input-activation quantization error is appended to it.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != model.arch.input_shape:
        raise ValidationError(f"input shape {x.shape[1:]} does not match {model.arch.input_shape}")
    if model.stem is not None:
        x = stem_forward(model.stem, x)
    for idx in range(len(model.arch.layers)):
        x = kernels.relu(batchnorm(layer_forward(model, idx, x, stats), model.bn[idx]))
    return head_forward(model.head, x, model.arch.pool)


def layer_forward(model: AssembledModel, idx: int, x, stats: list | None = None):
    """Quantized layer ``idx`` up to (not including) its batch norm."""
    spec = model.arch.layers[idx]
    if spec.kind == "linear" and x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    q = model.act[idx]
    a = quantize_activation(x, q)
    if stats is not None:
        err = a.data * q.step_size - x
        stats.append(
            {
                "layer": idx,
                "level": model.levels[idx],
                "bits": q.bits,
                "act_step": q.step_size,
                "mse": float(np.mean(err**2)),
                "clip_fraction": float(np.mean(x > q.step_size * (2**q.bits - 1) + q.step_size / 2)),
            }
        )
    w = model.weights[idx]
    if spec.kind == "conv":
        return conv2d_q(w, a, model.z[idx], w.step, q.step_size, spec.stride, spec.padding)
    return linear_q(w, a, model.z[idx], w.step, q.step_size)


def evaluate(model: AssembledModel, images, labels, batch_size: int = 500, top_k=(1, 5)) -> dict:
    """Top-k accuracy over a labelled set, as a plain record."""
    labels = np.asarray(labels)
    hits = {k: 0 for k in top_k if k <= model.arch.num_classes}
    for start in range(0, len(labels), batch_size):
        logits = forward(model, images[start : start + batch_size])
        y = labels[start : start + batch_size]
        order = np.argsort(-logits, axis=1, kind="stable")
        for k in hits:
            hits[k] += int((order[:, :k] == y[:, None]).any(axis=1).sum())
    total = max(len(labels), 1)
    record = {"samples": int(len(labels)), "bits": list(model.bits)}
    for k, h in hits.items():
        record[f"top{k}"] = h / total
    return record
