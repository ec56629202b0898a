"""Bit-plane (vertical-layered) representation of quantized weights.

A signed K-bit tensor is split into a ``basic_bits``-bit basic layer and
``K - basic_bits`` one-bit enhance planes. Plane ``i`` is the bit dropped when
the level-``i`` tensor is floor-halved into level ``i - 1``, so

    w_i = 2 * w_{i-1} + b_i,    s_i = s_{i-1} / 2.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CannotDownsample, ConsistencyError, CorruptData, InvalidArgument
from .quant import QTensor, QuantParams, storage_dtype


@dataclass(frozen=True, eq=False)
class BitPlane:
    data: np.ndarray
    level: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.size and not np.isin(data, (0, 1)).all():
            raise ConsistencyError("bit plane values must be 0 or 1")
        object.__setattr__(self, "data", data.astype(np.uint8, copy=False))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class VerticalStack:
    basic: QTensor
    enhance: tuple[BitPlane, ...]
    top_step: float

    def __post_init__(self):
        object.__setattr__(self, "enhance", tuple(self.enhance))
        if not self.basic.params.signed:
            raise InvalidArgument("vertical stacks hold signed weights only")
        for i, plane in enumerate(self.enhance, start=1):
            if plane.level != i:
                raise ConsistencyError(f"enhance plane at position {i} has level {plane.level}")
            if plane.shape != self.basic.shape:
                raise ConsistencyError("enhance plane shape differs from basic layer shape")
        expected = self.top_step * 2.0 ** self.n
        if self.basic.step != expected:
            raise ConsistencyError(
                f"basic step {self.basic.step} does not match top step * 2^n = {expected}"
            )

    @property
    def n(self) -> int:
        return len(self.enhance)

    @property
    def basic_bits(self) -> int:
        return self.basic.bits

    @property
    def shape(self):
        return self.basic.shape

    def step(self, level: int) -> float:
        return self.top_step * 2.0 ** (self.n - level)

    def __eq__(self, other):
        if not isinstance(other, VerticalStack):
            return NotImplemented
        return (
            self.basic == other.basic
            and self.top_step == other.top_step
            and self.n == other.n
            and all(np.array_equal(a.data, b.data) for a, b in zip(self.enhance, other.enhance))
        )


def downsample(w: QTensor) -> QTensor:
    """Drop the least significant bit: floor(w / 2) toward negative infinity.

    Signedness is preserved; weight stacks are always signed.
    """
    if w.bits < 2:
        raise CannotDownsample(f"cannot downsample a {w.bits}-bit tensor")
    params = QuantParams(w.step * 2.0, w.bits - 1, w.params.signed)
    out = np.floor_divide(w.data, 2).astype(storage_dtype(params.bits, params.signed))
    return QTensor(out, params)


def extract_enhance(hi: QTensor, lo: QTensor, level: int | None = None) -> BitPlane:
    if hi.shape != lo.shape:
        raise ConsistencyError(f"shape mismatch {hi.shape} vs {lo.shape}")
    bit = hi.data.astype(np.int32) - 2 * lo.data.astype(np.int32)
    if bit.size and not ((bit == 0) | (bit == 1)).all():
        raise ConsistencyError("inputs are not adjacent precisions: residual outside {0, 1}")
    if level is None:
        level = max(hi.bits - 2, 1)
    return BitPlane(bit.astype(np.uint8), level)


def decompose(top: QTensor, basic_bits: int = 2) -> VerticalStack:
    if basic_bits < 2 or top.bits < basic_bits:
        raise InvalidArgument(
            f"need top bits ({top.bits}) >= basic bits ({basic_bits}) >= 2"
        )
    n = top.bits - basic_bits
    planes = []
    cur = top
    for level in range(n, 0, -1):
        lo = downsample(cur)
        planes.append(extract_enhance(cur, lo, level))
        cur = lo
    return VerticalStack(cur, tuple(reversed(planes)), top.step)


def assemble(stack: VerticalStack, k: int) -> QTensor:
    if not 0 <= k <= stack.n:
        raise InvalidArgument(f"level {k} outside [0, {stack.n}]")
    acc = stack.basic.data.astype(np.int32)
    for plane in stack.enhance[:k]:
        acc = 2 * acc + plane.data
    bits = stack.basic_bits + k
    params = QuantParams(stack.step(k), bits, True)
    return QTensor(acc.astype(storage_dtype(bits, True)), params)


def compensation(i: int, n: int) -> float:
    """Mean of the discarded low bits, in level-``i`` units: (1 - 2^(i-n)) / 2.

    At ``n = 2`` this gives 0.375, 0.25 and 0 for levels 0, 1 and 2.
    """
    if n < 0 or not 0 <= i <= n:
        raise InvalidArgument(f"level {i} outside [0, {n}]")
    return (1.0 - 2.0 ** (i - n)) / 2.0


def compensated_dequantize(w: QTensor, i: int, n: int) -> np.ndarray:
    return (w.data.astype(np.float64) + compensation(i, n)) * w.step


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def _pack_fields(values: np.ndarray, bits: int) -> bytes:
    # MSB-first bitstream of fixed-width unsigned fields
    v = values.reshape(-1).astype(np.uint8)
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint8)
    fields = (v[:, None] >> shifts) & 1
    return np.packbits(fields.reshape(-1)).tobytes()


def _unpack_fields(buf: bytes, count: int, bits: int) -> np.ndarray:
    if len(buf) != packed_size(count, bits):
        raise CorruptData(
            f"expected {packed_size(count, bits)} bytes for {count} {bits}-bit values, got {len(buf)}"
        )
    raw = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))
    if raw[count * bits:].any():
        raise CorruptData("non-zero padding bits")
    fields = raw[: count * bits].reshape(count, bits).astype(np.int32)
    weights = 1 << np.arange(bits - 1, -1, -1, dtype=np.int32)
    return fields @ weights


def pack_planes(stack: VerticalStack) -> tuple[bytes, list[bytes]]:
    """Serialize the basic layer and each enhance plane.

    Basic values are offset-encoded to ``value + 2^(K0-1)`` and packed
    ``8 / K0`` per byte, first element in the most significant bits. Enhance
    planes are packed 8 bits per byte, MSB first. Pad bits are zero.
    """
    offset = stack.basic.params.qn
    basic = _pack_fields(stack.basic.data.astype(np.int32) + offset, stack.basic_bits)
    planes = [np.packbits(p.data.reshape(-1)).tobytes() for p in stack.enhance]
    return basic, planes


def unpack_planes(basic: bytes, planes, shape, top_step: float, basic_bits: int = 2) -> VerticalStack:
    shape = tuple(int(d) for d in shape)
    count = int(np.prod(shape, dtype=np.int64))
    n = len(planes)
    params = QuantParams(top_step * 2.0 ** n, basic_bits, True)
    values = _unpack_fields(basic, count, basic_bits) - params.qn
    basic_q = QTensor(values.reshape(shape).astype(storage_dtype(basic_bits, True)), params)
    enhance = []
    for level, buf in enumerate(planes, start=1):
        bits = _unpack_fields(buf, count, 1)
        enhance.append(BitPlane(bits.reshape(shape).astype(np.uint8), level))
    return VerticalStack(basic_q, tuple(enhance), top_step)
