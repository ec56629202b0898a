"""Uniform quantization primitives.

A real tensor ``v`` is mapped to integers ``clip(round(v / s), -Q_N, Q_P)``
and back by multiplying with the step size ``s``. Rounding is
round-half-to-even (``np.rint``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidData


def quant_range(bits: int, signed: bool) -> tuple[int, int]:
    """Return ``(Q_N, Q_P)`` so that quantized values lie in ``[-Q_N, Q_P]``."""
    if int(bits) != bits or bits < 1:
        raise InvalidArgument(f"bit width must be an integer >= 1, got {bits!r}")
    bits = int(bits)
    if signed:
        return 1 << (bits - 1), (1 << (bits - 1)) - 1
    return 0, (1 << bits) - 1


def storage_dtype(bits: int, signed: bool) -> np.dtype:
    if bits <= (8 if signed else 7):
        return np.dtype(np.int8)
    if bits <= (16 if signed else 15):
        return np.dtype(np.int16)
    return np.dtype(np.int32)


@dataclass(frozen=True)
class QuantParams:
    step_size: float
    bits: int
    signed: bool = True

    def __post_init__(self):
        if not np.isfinite(self.step_size) or self.step_size <= 0:
            raise InvalidArgument(f"step size must be positive and finite, got {self.step_size!r}")
        quant_range(self.bits, self.signed)

    @property
    def qn(self) -> int:
        return quant_range(self.bits, self.signed)[0]

    @property
    def qp(self) -> int:
        return quant_range(self.bits, self.signed)[1]


@dataclass(frozen=True, eq=False)
class QTensor:
    """Integer tensor plus the parameters that give it a real-valued meaning."""

    data: np.ndarray
    params: QuantParams

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype.kind not in "iu":
            raise InvalidData(f"QTensor data must be integer typed, got {data.dtype}")
        if data.size:
            lo, hi = int(data.min()), int(data.max())
            if lo < -self.params.qn or hi > self.params.qp:
                raise InvalidData(
                    f"values [{lo}, {hi}] outside [-{self.params.qn}, {self.params.qp}] "
                    f"for {self.params.bits}-bit {'signed' if self.params.signed else 'unsigned'}"
                )
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def step(self) -> float:
        return self.params.step_size

    @property
    def bits(self) -> int:
        return self.params.bits

    def __eq__(self, other):
        if not isinstance(other, QTensor):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"QTensor(shape={self.shape}, params={self.params})"


def round_clip(v: np.ndarray, step: float, qn: int, qp: int) -> np.ndarray:
    """Float-valued ``clip(rint(v / step), -qn, qp)``; the training path shares it."""
    return np.clip(np.rint(v / step), -qn, qp)


def quantize(v, params: QuantParams) -> QTensor:
    v = np.asarray(v, dtype=np.float64)
    finite = np.isfinite(v)
    if not finite.all():
        bad = tuple(int(i) for i in np.argwhere(~finite)[0])
        raise InvalidData(f"non-finite input element at index {bad}: {v[bad]!r}")
    q = round_clip(v, params.step_size, params.qn, params.qp)
    return QTensor(q.astype(storage_dtype(params.bits, params.signed)), params)


def dequantize(q: QTensor) -> np.ndarray:
    return q.data.astype(np.float64) * q.params.step_size
