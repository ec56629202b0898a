"""Trainable parameter sets and conversion to deployable models.

Parameters live in flat name -> array dicts so the optimizer, checkpoints
and gradient bookkeeping can treat them uniformly:

    w.<m>, sw.<m>            source weights and step size of quantized layer m
    sa.<m>.<i>               activation step of layer m at level i
    gamma.<m>.<j>, beta.<m>.<j>   BN affine (j = level in "full" mode, else 0)
    stem.w, stem.gamma, stem.beta, head.w, head.b

Running statistics are buffers, not parameters: ``mean.<m>.<r>`` and
``var.<m>.<r>`` with r = level in "stats"/"full" mode and 0 in "shared"
mode, plus ``stem.mean`` and ``stem.var``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateInit, InvalidArgument
from ..model import BN_MODES, Architecture, BNParams, HeadParams, LayeredModel, StemParams
from ..quant import QTensor, QuantParams, quantize
from ..vertical import BitPlane, VerticalStack, decompose


def affine_key(bn_mode: str, level: int) -> int:
    return level if bn_mode == "full" else 0


def stats_key(bn_mode: str, level: int) -> int:
    return 0 if bn_mode == "shared" else level


def decayed(name: str) -> bool:
    return name.startswith("w.") or name in ("stem.w", "head.w")


def level_of(name: str, bn_mode: str) -> int | None:
    """Level that owns a parameter, or None for parameters shared by all levels."""
    parts = name.split(".")
    if parts[0] == "sa":
        return int(parts[2])
    if parts[0] in ("gamma", "beta") and bn_mode == "full":
        return int(parts[2])
    return None


@dataclass
class FPParams:
    """Full-precision network with the same architecture (for pretraining)."""

    arch: Architecture
    params: dict
    buffers: dict


@dataclass
class SourceParams:
    arch: Architecture
    n: int
    basic_bits: int
    bn_mode: str
    compensate: bool
    params: dict
    buffers: dict
    meta: dict = field(default_factory=dict)

    @property
    def top_bits(self) -> int:
        return self.basic_bits + self.n

    def copy(self) -> "SourceParams":
        return SourceParams(
            self.arch, self.n, self.basic_bits, self.bn_mode, self.compensate,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            dict(self.meta),
        )

    def bn_param_count(self) -> int:
        """Affine parameters plus running statistics over the quantized layers."""
        keys = [k for k in list(self.params) + list(self.buffers) if k.split(".")[0] in ("gamma", "beta", "mean", "var")]
        return int(sum((self.params.get(k, self.buffers.get(k))).size for k in keys))


def init_fp(arch: Architecture, seed: int) -> FPParams:
    """He-normal conv/linear weights, unit BN, zero biases."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}

    def he(shape):
        fan_in = int(np.prod(shape[1:]))
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    if arch.stem is not None:
        c = arch.stem.out_channels
        params["stem.w"] = he((c, arch.input_shape[0], arch.stem.kernel, arch.stem.kernel))
        params["stem.gamma"], params["stem.beta"] = np.ones(c), np.zeros(c)
        buffers["stem.mean"], buffers["stem.var"] = np.zeros(c), np.ones(c)
    for m, spec in enumerate(arch.layers):
        c = spec.out_features
        params[f"w.{m}"] = he(spec.weight_shape)
        params[f"gamma.{m}"], params[f"beta.{m}"] = np.ones(c), np.zeros(c)
        buffers[f"mean.{m}"], buffers[f"var.{m}"] = np.zeros(c), np.ones(c)
    hf = arch.head_features
    params["head.w"] = rng.normal(0.0, np.sqrt(1.0 / hf), size=(arch.num_classes, hf))
    params["head.b"] = np.zeros(arch.num_classes)
    return FPParams(arch, params, buffers)


def init_params(
    fp: FPParams,
    layer_inputs,
    n: int,
    basic_bits: int = 2,
    bn_mode: str = "full",
    compensate: bool = True,
) -> SourceParams:
    """Quantized parameters seeded from a full-precision model.

    ``layer_inputs[m]`` holds the first batch's activations entering layer m.
    Weight steps follow 2 * mean|w| / sqrt(2^K_top - 1); activation steps are
    max|a| / (2^K_i - 1) with K_i the level-i width.
    """
    if bn_mode not in BN_MODES:
        raise InvalidArgument(f"unknown BN mode {bn_mode!r}")
    arch = fp.arch
    top_bits = basic_bits + n
    params, buffers = {}, {}
    for key in ("stem.w", "stem.gamma", "stem.beta", "head.w", "head.b"):
        if key in fp.params:
            params[key] = fp.params[key].copy()
    for key in ("stem.mean", "stem.var"):
        if key in fp.buffers:
            buffers[key] = fp.buffers[key].copy()
    for m, spec in enumerate(arch.layers):
        w = fp.params[f"w.{m}"]
        try:
            params[f"sw.{m}"] = np.asarray(initial_weight_step(w, top_bits))
        except DegenerateInit as exc:
            raise DegenerateInit(f"layer {m}: {exc}") from None
        params[f"w.{m}"] = w.copy()
        for i in range(n + 1):
            step = initial_act_step(layer_inputs[m], basic_bits + i)
            params[f"sa.{m}.{i}"] = np.asarray(max(step, 1e-8))
        for j in sorted({affine_key(bn_mode, i) for i in range(n + 1)}):
            params[f"gamma.{m}.{j}"] = fp.params[f"gamma.{m}"].copy()
            params[f"beta.{m}.{j}"] = fp.params[f"beta.{m}"].copy()
        for r in sorted({stats_key(bn_mode, i) for i in range(n + 1)}):
            buffers[f"mean.{m}.{r}"] = fp.buffers[f"mean.{m}"].copy()
            buffers[f"var.{m}.{r}"] = fp.buffers[f"var.{m}"].copy()
    return SourceParams(arch, n, basic_bits, bn_mode, compensate, params, buffers)


def initial_weight_step(w, top_bits: int) -> float:
    mean_abs = float(np.abs(w).mean())
    if mean_abs == 0.0:
        raise DegenerateInit("all-zero weight tensor")
    return 2.0 * mean_abs / np.sqrt(2.0**top_bits - 1)


def initial_act_step(a, bits: int) -> float:
    return float(np.abs(a).max()) / (2.0**bits - 1)


def _stem_and_head(arch, params, buffers):
    stem = None
    if arch.stem is not None:
        bn = BNParams(buffers["stem.mean"].copy(), buffers["stem.var"].copy(), params["stem.gamma"].copy(), params["stem.beta"].copy())
        stem = StemParams(params["stem.w"].copy(), bn, arch.stem.stride, arch.stem.padding)
    return stem, HeadParams(params["head.w"].copy(), params["head.b"].copy())


def level_bn(sp: SourceParams, m: int, i: int) -> BNParams:
    a, r = affine_key(sp.bn_mode, i), stats_key(sp.bn_mode, i)
    return BNParams(
        sp.buffers[f"mean.{m}.{r}"].copy(),
        sp.buffers[f"var.{m}.{r}"].copy(),
        sp.params[f"gamma.{m}.{a}"].copy(),
        sp.params[f"beta.{m}.{a}"].copy(),
    )


def to_layered(sp: SourceParams) -> LayeredModel:
    """Quantize the source weights and split them into vertical stacks."""
    stacks = []
    for m in range(len(sp.arch.layers)):
        sw = float(sp.params[f"sw.{m}"])
        top = quantize(sp.params[f"w.{m}"], QuantParams(sw, sp.top_bits, True))
        stacks.append(decompose(top, sp.basic_bits))
    return assemble_layered(sp, stacks, sp.compensate)


def assemble_layered(sp: SourceParams, stacks, compensate) -> LayeredModel:
    m_count = len(sp.arch.layers)
    bn = [[level_bn(sp, m, i) for i in range(sp.n + 1)] for m in range(m_count)]
    act = np.array([[float(sp.params[f"sa.{m}.{i}"]) for i in range(sp.n + 1)] for m in range(m_count)]).reshape(m_count, sp.n + 1)
    stem, head = _stem_and_head(sp.arch, sp.params, sp.buffers)
    return LayeredModel(
        arch=sp.arch, basic_bits=sp.basic_bits, n=sp.n, stacks=stacks, bn=bn, act_steps=act,
        head=head, stem=stem, compensate=compensate, bn_mode=sp.bn_mode,
    ).validate()


def stacks_from_planes(basic: list[np.ndarray], planes: list[list[np.ndarray]], basic_steps, basic_bits: int) -> list[VerticalStack]:
    """Build stacks from integer basic layers and per-level bit planes."""
    out = []
    for m, (b, s0) in enumerate(zip(basic, basic_steps)):
        n = len(planes[m])
        q = QTensor(b.astype(np.int8), QuantParams(float(s0), basic_bits, True))
        enh = tuple(BitPlane(p.astype(np.uint8), i + 1) for i, p in enumerate(planes[m]))
        out.append(VerticalStack(q, enh, float(s0) / 2.0**n))
    return out
