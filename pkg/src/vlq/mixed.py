"""Post-training mixed precision: per-layer level choice under a bit budget.

A layer's cost at level i is N_m * (basic_bits + i) weight bits. The error of
choosing level i is the squared distance between the layer's reconstructed
level-i weights and its top-level weights, measured in real units so layers
with different step sizes can be compared.
"""
from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import Infeasible, InvalidArgument
from .infer import AssembledModel, assemble_model, batchnorm, evaluate, layer_forward, stem_forward
from .model import BNParams, LayeredModel
from .quant import dequantize
from .vertical import assemble, compensation


@dataclass(frozen=True)
class BitAllocation:
    levels: tuple[int, ...]
    total_bits: int
    objective: float
    budget: int

    def as_record(self, sizes=None, basic_bits: int = 2) -> dict:
        rec = {"budget": self.budget, "total_bits": self.total_bits, "objective": self.objective, "levels": list(self.levels)}
        if sizes is not None:
            rec["bits"] = [basic_bits + k for k in self.levels]
        return rec


def layer_error_table(model: LayeredModel) -> np.ndarray:
    """M x (n+1) table of squared reconstruction error against the top level.

    Lower levels are reconstructed the way inference sees them, so with
    compensation on, the (w_i + z_i) * s_i form is used.
    """
    table = np.zeros((len(model.stacks), model.n + 1))
    for m, stack in enumerate(model.stacks):
        top = dequantize(assemble(stack, model.n))
        for i in range(model.n):
            q = assemble(stack, i)
            z = compensation(i, model.n) if model.compensate else 0.0
            diff = (q.data.astype(np.float64) + z) * q.step - top
            table[m, i] = float(np.sum(diff * diff))
    return table


def allocation_bits(levels, sizes, basic_bits: int = 2) -> int:
    return int(sum(int(n) * (basic_bits + int(k)) for n, k in zip(sizes, levels)))


def allocate_bits(errors, sizes, n: int, budget: int, basic_bits: int = 2) -> BitAllocation:
    """Exact minimum-error level choice with total weight bits <= budget.

    Multiple-choice knapsack solved by dynamic programming over the spare
    bits above the all-basic configuration, in units of gcd(N_m). Among
    optimal choices the earliest layers get the most bits.
    """
    err = np.asarray(errors, dtype=np.float64)
    sizes = [int(s) for s in sizes]
    if err.ndim != 2 or err.shape != (len(sizes), n + 1):
        raise InvalidArgument(f"error table must be {len(sizes)} x {n + 1}, got {err.shape}")
    if any(s <= 0 for s in sizes):
        raise InvalidArgument("layer sizes must be positive")
    budget = int(budget)
    floor_bits = sum(sizes) * basic_bits
    if budget < floor_bits:
        raise Infeasible(floor_bits, budget)
    m_count = len(sizes)
    if m_count == 0:
        return BitAllocation((), 0, 0.0, budget)
    unit = math.gcd(*sizes)
    cost = [s // unit for s in sizes]  # units per enhance level
    spare = min((budget - floor_bits) // unit, sum(cost) * n)
    # best[m][e]: least error of layers m.. using at most e spare units
    best = [None] * (m_count + 1)
    best[m_count] = np.zeros(spare + 1)
    for m in range(m_count - 1, -1, -1):
        cur = np.full(spare + 1, np.inf)
        for i in range(n + 1):
            shift = i * cost[m]
            if shift > spare:
                break
            cand = err[m, i] + best[m + 1][: spare + 1 - shift]
            cur[shift:] = np.minimum(cur[shift:], cand)
        best[m] = cur
    levels, e = [], spare
    for m in range(m_count):
        vals = [err[m, i] + best[m + 1][e - i * cost[m]] for i in range(n + 1) if i * cost[m] <= e]
        target = min(vals)
        choice = max(i for i, v in enumerate(vals) if v == target)
        levels.append(choice)
        e -= choice * cost[m]
    objective = float(sum(err[m, k] for m, k in enumerate(levels)))
    return BitAllocation(tuple(levels), allocation_bits(levels, sizes, basic_bits), objective, budget)


def brute_force_allocation(errors, sizes, n: int, budget: int, basic_bits: int = 2) -> BitAllocation:
    """Exhaustive search over all (n+1)^M assignments; for checking small cases."""
    err = np.asarray(errors, dtype=np.float64)
    best = None
    for levels in itertools.product(range(n + 1), repeat=len(sizes)):
        bits = allocation_bits(levels, sizes, basic_bits)
        if bits > budget:
            continue
        obj = float(sum(err[m, k] for m, k in enumerate(levels)))
        if best is None or obj < best.objective:
            best = BitAllocation(tuple(levels), bits, obj, budget)
    if best is None:
        raise Infeasible(sum(sizes) * basic_bits, budget)
    return best


class _Moments:
    """Per-channel count, mean and centered sum of squares, merged batch by batch."""

    def __init__(self, channels: int):
        self.count = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)

    def update(self, y):
        axes = (0,) if y.ndim == 2 else (0, 2, 3)
        k = y.size // y.shape[1]
        mu = y.mean(axis=axes)
        m2 = ((y - mu.reshape((1, -1) + (1,) * (y.ndim - 2))) ** 2).sum(axis=axes)
        total = self.count + k
        delta = mu - self.mean
        self.mean = self.mean + delta * (k / total)
        self.m2 = self.m2 + m2 + delta * delta * (self.count * k / total)
        self.count = total

    @property
    def var(self):
        return self.m2 / self.count


def recalibrate_bn(model: AssembledModel, images, batch_size: int = 500) -> AssembledModel:
    """Re-estimate every quantized layer's BN mean and (biased) variance.

    Layers are done in order: layer m's statistics are measured with layers
    before it already using their new statistics. Affine terms are kept.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise InvalidArgument("calibration set is empty")
    bns = list(model.bn)
    for m in range(len(model.arch.layers)):
        current = dataclasses.replace(model, bn=tuple(bns))
        mom = _Moments(model.arch.layers[m].out_features)
        for start in range(0, len(images), batch_size):
            mom.update(_pre_bn(current, m, images[start : start + batch_size]))
        old = bns[m]
        bns[m] = BNParams(mom.mean, mom.var, old.scale.copy(), old.shift.copy())
    return dataclasses.replace(model, bn=tuple(bns))


def _pre_bn(model: AssembledModel, target: int, x):
    if model.stem is not None:
        x = stem_forward(model.stem, x)
    for idx in range(target):
        x = kernels.relu(batchnorm(layer_forward(model, idx, x), model.bn[idx]))
    return layer_forward(model, target, x)


def with_allocation(model: LayeredModel, allocation: BitAllocation | list, bn=None) -> LayeredModel:
    """Copy of ``model`` tagged with a per-layer allocation.

    ``bn`` (one BNParams per layer, e.g. from :func:`recalibrate_bn`) replaces
    the statistics stored at each layer's chosen level.
    """
    levels = list(allocation.levels if isinstance(allocation, BitAllocation) else allocation)
    tables = [[b.copy() for b in row] for row in model.bn]
    if bn is not None:
        for m, k in enumerate(levels):
            tables[m][k] = bn[m].copy()
    return dataclasses.replace(model, bn=tables, allocation=levels).validate()


def mix(model: LayeredModel, budget: int, calibration=None, batch_size: int = 500):
    """Allocate under ``budget`` and, given calibration images, recalibrate BN.

    Returns (allocation, assembled model, layered model carrying the allocation).
    """
    sizes = [spec.weight_count for spec in model.arch.layers]
    alloc = allocate_bits(layer_error_table(model), sizes, model.n, budget, model.basic_bits)
    assembled = assemble_model(model, list(alloc.levels))
    if calibration is not None:
        assembled = recalibrate_bn(assembled, calibration, batch_size)
    return alloc, assembled, with_allocation(model, alloc, assembled.bn if calibration is not None else None)


def budget_sweep(model: LayeredModel, budgets, calibration=None, test=None, batch_size: int = 500) -> list[dict]:
    """One record per budget: allocation, objective and (with test data) accuracy."""
    sizes = [spec.weight_count for spec in model.arch.layers]
    records = []
    for budget in budgets:
        alloc, assembled, _ = mix(model, budget, calibration, batch_size)
        rec = alloc.as_record(sizes, model.basic_bits)
        rec["bits_per_weight"] = alloc.total_bits / sum(sizes) if sizes else 0.0
        if test is not None:
            images, labels = test
            rec.update({k: v for k, v in evaluate(assembled, images, labels, batch_size).items() if k.startswith("top")})
        records.append(rec)
    return records

