"""Progressive on-disk format for vertical-layered models.

File layout, little-endian throughout::

    "VLQN" | version u16 | manifest length u32 | manifest | basic section | enhance sections

The manifest is a sequence of records, each ``[length u32][payload]``, in
this order, followed by a CRC-32 of the record bytes:

    1. globals: basic_bits u8, n u8, compensate u8, bn_mode u8,
       pool u8 (0 average, 1 flatten), num_classes u16, input C/H/W u16 x3
    2. stem descriptor: empty, or out_channels u16, kernel u8, stride u8, padding u8
    3. layer count u16
    4. one descriptor per quantized layer: kind u8 (0 conv, 1 linear),
       in u32, out u32, kernel u8, stride u8, padding u8, top step f32
    5. activation step sizes, f32[M * (n+1)], layer-major
    6. one BN table per (layer, level): mean, var, scale, shift as f32[C] each
    7. stem weight f32 followed by stem BN (empty without a stem)
    8. head weight f32 then head bias f32
    9. mixed allocation: empty, or a 0x01 flag then one u8 level per layer

A section is ``[level u8][payload length u32][payload][CRC-32]`` with the CRC
covering level, length and payload. The basic section (level 0) holds each
layer's packed basic layer in layer order; enhance section ``i`` holds each
layer's packed plane ``i``. Sections may sit inline after the basic section
or in sidecar files ``<path>.e<i>``; a reader fetches only what it needs.
"""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptData, InvalidArgument, MissingLayer, ValidationError
from .infer import AssembledModel, assemble_model
from .model import (
    BN_MODES,
    POOLS,
    Architecture,
    BNParams,
    HeadParams,
    LayeredModel,
    LayerSpec,
    StemParams,
    StemSpec,
)
from .vertical import pack_planes, packed_size, unpack_planes

MAGIC = b"VLQN"
VERSION = 1
SECTION_OVERHEAD = 1 + 4 + 4

_GLOBALS = struct.Struct("<BBBBBH3H")
_STEM = struct.Struct("<HBBB")
_LAYER = struct.Struct("<BIIBBBf")
_SECTION_HEAD = struct.Struct("<BI")


def _f32(a) -> bytes:
    return np.asarray(a, dtype="<f4").tobytes()


def _record(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def _bn_bytes(bn: BNParams) -> bytes:
    return b"".join(_f32(a) for a in (bn.mean, bn.var, bn.scale, bn.shift))


def _check_consistent(model: LayeredModel):
    depths = {s.n for s in model.stacks}
    if depths - {model.n}:
        raise ValidationError(f"stacks have inconsistent depths {sorted(depths)}; model n = {model.n}")
    model.validate()


def encode_manifest(model: LayeredModel) -> bytes:
    arch = model.arch
    records = [
        _GLOBALS.pack(
            model.basic_bits,
            model.n,
            int(model.compensate),
            BN_MODES.index(model.bn_mode),
            POOLS.index(arch.pool),
            arch.num_classes,
            *arch.input_shape,
        ),
        b"" if arch.stem is None else _STEM.pack(arch.stem.out_channels, arch.stem.kernel, arch.stem.stride, arch.stem.padding),
        struct.pack("<H", len(arch.layers)),
    ]
    for spec, stack in zip(arch.layers, model.stacks):
        kind = 0 if spec.kind == "conv" else 1
        records.append(
            _LAYER.pack(kind, spec.in_features, spec.out_features, spec.kernel, spec.stride, spec.padding, stack.top_step)
        )
    records.append(_f32(np.asarray(model.act_steps, dtype=np.float64).reshape(-1)))
    for row in model.bn:
        for bn in row:
            records.append(_bn_bytes(bn))
    records.append(b"" if model.stem is None else _f32(model.stem.weight) + _bn_bytes(model.stem.bn))
    records.append(_f32(model.head.weight) + _f32(model.head.bias))
    records.append(b"" if model.allocation is None else b"\x01" + bytes(int(i) for i in model.allocation))
    body = b"".join(_record(r) for r in records)
    return body + struct.pack("<I", zlib.crc32(body))


def _section(level: int, payload: bytes) -> bytes:
    head = _SECTION_HEAD.pack(level, len(payload))
    return head + payload + struct.pack("<I", zlib.crc32(head + payload))


def encode_sections(model: LayeredModel) -> tuple[bytes, list[bytes]]:
    """Return (header + manifest + basic section, [enhance section bytes])."""
    _check_consistent(model)
    manifest = encode_manifest(model)
    packed = [pack_planes(s) for s in model.stacks]
    basic = _section(0, b"".join(b for b, _ in packed))
    enhance = [_section(i, b"".join(p[i - 1] for _, p in packed)) for i in range(1, model.n + 1)]
    header = MAGIC + struct.pack("<HI", VERSION, len(manifest)) + manifest
    return header + basic, enhance


def encode_model(model: LayeredModel) -> bytes:
    """Single-stream encoding with all enhance sections inline."""
    base, enhance = encode_sections(model)
    return base + b"".join(enhance)


def write_model(model: LayeredModel, path, split: bool = True) -> list[Path]:
    """Write ``path`` and, when ``split``, one sidecar file per enhance level."""
    path = Path(path)
    base, enhance = encode_sections(model)
    if not split:
        path.write_bytes(base + b"".join(enhance))
        return [path]
    path.write_bytes(base)
    written = [path]
    for i, sec in enumerate(enhance, start=1):
        side = sidecar_path(path, i)
        side.write_bytes(sec)
        written.append(side)
    return written


def sidecar_path(path, level: int) -> Path:
    path = Path(path)
    return path.with_name(f"{path.name}.e{level}")


# -- decoding ---------------------------------------------------------------


@dataclass
class Manifest:
    arch: Architecture
    basic_bits: int
    n: int
    compensate: bool
    bn_mode: str
    top_steps: list[float]
    act_steps: np.ndarray
    bn: list[list[BNParams]]
    stem: StemParams | None
    head: HeadParams
    allocation: list[int] | None


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.buf):
            raise CorruptData("manifest truncated")
        out = self.buf[self.pos : self.pos + count]
        self.pos += count
        return out

    def record(self) -> bytes:
        (length,) = struct.unpack("<I", self.take(4))
        return self.take(length)


def _floats(raw: bytes, count: int) -> np.ndarray:
    if len(raw) != 4 * count:
        raise CorruptData(f"expected {count} f32 values, got {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def _split_floats(raw: bytes, sizes) -> list[np.ndarray]:
    vals = _floats(raw, sum(sizes))
    out, at = [], 0
    for s in sizes:
        out.append(vals[at : at + s].copy())
        at += s
    return out


def _bn_from(raw: bytes, c: int) -> BNParams:
    return BNParams(*_split_floats(raw, [c] * 4))


def decode_manifest(buf: bytes) -> Manifest:
    if len(buf) < 4:
        raise CorruptData("manifest truncated")
    body, crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) != crc:
        raise CorruptData("manifest checksum mismatch")
    cur = _Cursor(body)
    try:
        g = _GLOBALS.unpack(cur.record())
        basic_bits, n, compensate, bn_idx, pool_idx, num_classes = g[:6]
        input_shape = g[6:]
        raw = cur.record()
        stem_spec = StemSpec(*_STEM.unpack(raw)) if raw else None
        (m,) = struct.unpack("<H", cur.record())
        layers, steps = [], []
        for _ in range(m):
            kind, fin, fout, k, stride, pad, step = _LAYER.unpack(cur.record())
            layers.append(LayerSpec("conv" if kind == 0 else "linear", fin, fout, k, stride, pad))
            steps.append(float(step))
    except (struct.error, ValidationError, ValueError) as exc:
        raise CorruptData(f"malformed manifest: {exc}") from exc
    if bn_idx >= len(BN_MODES):
        raise CorruptData(f"unknown BN mode index {bn_idx}")
    if pool_idx >= len(POOLS):
        raise CorruptData(f"unknown pooling index {pool_idx}")
    try:
        arch = Architecture(tuple(input_shape), tuple(layers), num_classes, stem_spec, POOLS[pool_idx])
    except ValidationError as exc:
        raise CorruptData(f"inconsistent layer descriptors: {exc}") from exc
    act = _floats(cur.record(), m * (n + 1)).reshape(m, n + 1)
    bn = [[_bn_from(cur.record(), spec.out_features) for _ in range(n + 1)] for spec in layers]
    raw = cur.record()
    stem = None
    if stem_spec is not None:
        in_c = arch.input_shape[0]
        c = stem_spec.out_channels
        wcount = c * in_c * stem_spec.kernel**2
        w, *bn_arrays = _split_floats(raw, [wcount, c, c, c, c])
        stem = StemParams(w.reshape(c, in_c, stem_spec.kernel, stem_spec.kernel), BNParams(*bn_arrays), stem_spec.stride, stem_spec.padding)
    elif raw:
        raise CorruptData("stem tensors present without a stem descriptor")
    hf = arch.head_features
    hw, hb = _split_floats(cur.record(), [num_classes * hf, num_classes])
    head = HeadParams(hw.reshape(num_classes, hf), hb)
    raw = cur.record()
    allocation = None
    if raw:
        if raw[0] != 1 or len(raw) != m + 1:
            raise CorruptData("malformed allocation record")
        allocation = list(raw[1:])
    if cur.pos != len(body):
        raise CorruptData("trailing bytes in manifest")
    return Manifest(arch, basic_bits, n, bool(compensate), BN_MODES[bn_idx], steps, act, bn, stem, head, allocation)


class Reader:
    """Sequential reader over a model file and its optional sidecars.

    ``bytes_read`` counts every byte pulled from any source, so callers can
    confirm that decoding level ``k`` never touches sections above ``k``.
    """

    def __init__(self, source):
        self.path = None
        if isinstance(source, (bytes, bytearray, memoryview)):
            self._main = io.BytesIO(bytes(source))
        else:
            self.path = Path(source)
            self._main = open(self.path, "rb")
        self.bytes_read = 0
        self._inline_done = False
        self._inline: dict[int, bytes] = {}
        self.manifest = self._read_header()
        self.basic = self._read_section(self._main, expect=0)

    def close(self):
        self._main.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _read(self, f, count: int) -> bytes:
        data = f.read(count)
        self.bytes_read += len(data)
        return data

    def _read_header(self) -> Manifest:
        head = self._read(self._main, 10)
        if len(head) < 10 or head[:4] != MAGIC:
            raise CorruptData("not a VLQN file (bad magic)")
        version, length = struct.unpack("<HI", head[4:])
        if version != VERSION:
            raise CorruptData(f"unsupported format version {version}")
        buf = self._read(self._main, length)
        if len(buf) != length:
            raise CorruptData("file truncated inside manifest")
        self.header = head + buf
        return decode_manifest(buf)

    def _read_section(self, f, expect: int | None = None):
        head = self._read(f, _SECTION_HEAD.size)
        if not head:
            return None
        if len(head) < _SECTION_HEAD.size:
            raise CorruptData("truncated section header")
        level, length = _SECTION_HEAD.unpack(head)
        payload = self._read(f, length)
        tail = self._read(f, 4)
        if len(payload) != length or len(tail) != 4:
            raise CorruptData(f"section {level} truncated")
        if zlib.crc32(head + payload) != struct.unpack("<I", tail)[0]:
            raise CorruptData(f"checksum mismatch in section {level}")
        if expect is not None and level != expect:
            raise CorruptData(f"expected section {expect}, found {level}")
        expected_len = section_sizes(self.manifest)[level] if level <= self.manifest.n else None
        if expected_len is None or length != expected_len:
            raise CorruptData(f"section {level} has {length} payload bytes, expected {expected_len}")
        return level, payload

    def section(self, level: int) -> bytes | None:
        """Payload for enhance ``level``, or None when it is nowhere to be found."""
        # inline sections come in order, so read only up to the wanted one
        while level not in self._inline and not self._inline_done:
            got = self._read_section(self._main)
            if got is None:
                self._inline_done = True
                break
            lvl, payload = got
            if lvl != len(self._inline) + 1:
                raise CorruptData(f"inline section {lvl} out of order")
            self._inline[lvl] = payload
        if level in self._inline:
            return self._inline[level]
        if self.path is None:
            return None
        side = sidecar_path(self.path, level)
        if not side.exists():
            return None
        with open(side, "rb") as f:
            got = self._read_section(f, expect=level)
            if self._read(f, 1):
                raise CorruptData(f"trailing bytes in {side.name}")
        return got[1]


def _split_payload(payload: bytes, sizes) -> list[bytes]:
    out, at = [], 0
    for s in sizes:
        out.append(payload[at : at + s])
        at += s
    return out


def read_layered(source, k: int | None = None) -> LayeredModel:
    """Decode stacks holding enhance planes 1..k (all planes when k is None).

    The returned model keeps the full depth ``n`` for compensation and BN
    bookkeeping; its stacks are truncated to ``k`` planes.
    """
    with Reader(source) as reader:
        man = reader.manifest
        if k is None:
            k = man.n
        if not 0 <= k <= man.n:
            raise InvalidArgument(f"level {k} outside [0, {man.n}]")
        planes = []
        missing = []
        for level in range(1, k + 1):
            payload = reader.section(level)
            if payload is None:
                missing.append(level)
            planes.append(payload)
        if missing:
            raise MissingLayer(missing)
        counts = [spec.weight_count for spec in man.arch.layers]
        basic_parts = _split_payload(reader.basic[1], [packed_size(c, man.basic_bits) for c in counts])
        plane_parts = [_split_payload(p, [packed_size(c, 1) for c in counts]) for p in planes]
        stacks = []
        for idx, spec in enumerate(man.arch.layers):
            top_step = man.top_steps[idx] * 2.0 ** (man.n - k)
            layer_planes = [parts[idx] for parts in plane_parts]
            try:
                stacks.append(unpack_planes(basic_parts[idx], layer_planes, spec.weight_shape, top_step, man.basic_bits))
            except InvalidArgument as exc:
                raise CorruptData(f"layer {idx}: {exc}") from exc
    model = LayeredModel(
        arch=man.arch,
        basic_bits=man.basic_bits,
        n=man.n,
        stacks=stacks,
        bn=man.bn,
        act_steps=man.act_steps,
        head=man.head,
        stem=man.stem,
        compensate=man.compensate,
        bn_mode=man.bn_mode,
        allocation=man.allocation,
    )
    if k == man.n:
        try:
            model.validate()
        except ValidationError as exc:
            raise CorruptData(str(exc)) from exc
    return model


def write_prefix(source, k: int, path) -> int:
    """Write a single file holding the basic section and enhance sections 1..k.

    The result decodes at any level up to ``k`` and reports the higher levels
    as missing. Returns the number of bytes written.
    """
    with Reader(source) as reader:
        if not 0 <= k <= reader.manifest.n:
            raise InvalidArgument(f"level {k} outside [0, {reader.manifest.n}]")
        parts = [reader.header, _section(0, reader.basic[1])]
        missing = []
        for level in range(1, k + 1):
            payload = reader.section(level)
            if payload is None:
                missing.append(level)
            else:
                parts.append(_section(level, payload))
    if missing:
        raise MissingLayer(missing)
    data = b"".join(parts)
    Path(path).write_bytes(data)
    return len(data)


def decode_full(source) -> LayeredModel:
    return read_layered(source, None)


def decode_at_precision(source, k) -> AssembledModel:
    """Runnable model at level ``k`` (an int, or one level per layer)."""
    top = int(k) if np.ndim(k) == 0 else max(k, default=0)
    return assemble_model(read_layered(source, top), k)


def section_sizes(manifest: Manifest | LayeredModel) -> list[int]:
    """Payload bytes of the basic section and of each enhance section."""
    counts = [spec.weight_count for spec in manifest.arch.layers]
    basic = sum(packed_size(c, manifest.basic_bits) for c in counts)
    plane = sum(packed_size(c, 1) for c in counts)
    return [basic] + [plane] * manifest.n


def peek_manifest(source) -> Manifest:
    with Reader(source) as reader:
        return reader.manifest
