"""Network description and the vertical-layered model container."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .kernels import conv_output_size
from .vertical import VerticalStack

BN_MODES = ("shared", "stats", "full")
POOLS = ("avg", "flatten")


@dataclass(frozen=True)
class StemSpec:
    """Full-precision first convolution, followed by BN and ReLU."""

    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" or "linear"
    in_features: int
    out_features: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "linear"):
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "linear" and (self.kernel, self.stride, self.padding) != (1, 1, 0):
            raise ValidationError("linear layers take no kernel geometry")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.out_features, self.in_features, self.kernel, self.kernel)
        return (self.out_features, self.in_features)

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.weight_shape))


@dataclass(frozen=True)
class Architecture:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    num_classes: int
    stem: StemSpec | None = None
    pool: str = "avg"  # how 3-D features reach the head: global average or flatten

    def __post_init__(self):
        if self.pool not in POOLS:
            raise ValidationError(f"unknown pooling {self.pool!r}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.feature_shapes()

    def feature_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample input shape of every quantized layer, then of the head."""
        c, h, w = self.input_shape
        shape: tuple[int, ...] = (c, h, w)
        if self.stem is not None:
            h = conv_output_size(h, self.stem.kernel, self.stem.stride, self.stem.padding)
            w = conv_output_size(w, self.stem.kernel, self.stem.stride, self.stem.padding)
            shape = (self.stem.out_channels, h, w)
        shapes = []
        for spec in self.layers:
            shapes.append(shape)
            if spec.kind == "conv":
                if len(shape) != 3 or shape[0] != spec.in_features:
                    raise ValidationError(f"conv layer expects {spec.in_features} channels, got shape {shape}")
                h = conv_output_size(shape[1], spec.kernel, spec.stride, spec.padding)
                w = conv_output_size(shape[2], spec.kernel, spec.stride, spec.padding)
                if h < 1 or w < 1:
                    raise ValidationError("convolution output collapses to zero size")
                shape = (spec.out_features, h, w)
            else:
                flat = int(np.prod(shape))
                if flat != spec.in_features:
                    raise ValidationError(f"linear layer expects {spec.in_features} inputs, got {flat}")
                shape = (spec.out_features,)
        shapes.append(shape)
        return shapes

    @property
    def head_features(self) -> int:
        shape = self.feature_shapes()[-1]
        if len(shape) == 3 and self.pool == "flatten":
            return int(np.prod(shape))
        return shape[0]


def mnist_small(width: int = 8) -> Architecture:
    """Stem conv (stride 2) -> two stride-2 quantized convs -> flattened FC."""
    return Architecture(
        input_shape=(1, 28, 28),
        stem=StemSpec(width, kernel=3, stride=2, padding=1),
        layers=(
            LayerSpec("conv", width, 2 * width, kernel=3, stride=2, padding=1),
            LayerSpec("conv", 2 * width, 4 * width, kernel=3, stride=2, padding=1),
        ),
        num_classes=10,
        pool="flatten",
    )


def cifar_small(width: int = 32) -> Architecture:
    return Architecture(
        input_shape=(3, 32, 32),
        stem=StemSpec(width, kernel=3, stride=1, padding=1),
        layers=(
            LayerSpec("conv", width, width, kernel=3, stride=2, padding=1),
            LayerSpec("conv", width, 2 * width, kernel=3, stride=1, padding=1),
            LayerSpec("conv", 2 * width, 2 * width, kernel=3, stride=2, padding=1),
        ),
        num_classes=10,
    )


ARCHITECTURES = {"mnist-small": mnist_small, "cifar-small": cifar_small}


@dataclass
class BNParams:
    mean: np.ndarray
    var: np.ndarray
    scale: np.ndarray
    shift: np.ndarray

    @classmethod
    def identity(cls, channels: int) -> "BNParams":
        return cls(np.zeros(channels), np.ones(channels), np.ones(channels), np.zeros(channels))

    def copy(self) -> "BNParams":
        return BNParams(self.mean.copy(), self.var.copy(), self.scale.copy(), self.shift.copy())

    def __eq__(self, other):
        if not isinstance(other, BNParams):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("mean", "var", "scale", "shift")
        )


@dataclass
class StemParams:
    weight: np.ndarray
    bn: BNParams
    stride: int
    padding: int


@dataclass
class HeadParams:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class LayeredModel:
    """A trained network whose quantized layers are stored as vertical stacks.

    ``bn[m][i]`` and ``act_steps[m, i]`` hold layer ``m``'s batch-norm table and
    input-activation step size when the network runs at level ``i``.
    """

    arch: Architecture
    basic_bits: int
    n: int
    stacks: list[VerticalStack]
    bn: list[list[BNParams]]
    act_steps: np.ndarray
    head: HeadParams
    stem: StemParams | None = None
    compensate: bool = True
    bn_mode: str = "full"
    allocation: list[int] | None = field(default=None)

    def validate(self) -> "LayeredModel":
        m = len(self.arch.layers)
        if len(self.stacks) != m or len(self.bn) != m:
            raise ValidationError(f"expected {m} stacks and BN rows, got {len(self.stacks)} and {len(self.bn)}")
        if self.bn_mode not in BN_MODES:
            raise ValidationError(f"unknown BN mode {self.bn_mode!r}")
        for spec, stack, bn_row in zip(self.arch.layers, self.stacks, self.bn):
            if stack.n != self.n:
                raise ValidationError(f"stack depth {stack.n} differs from model depth {self.n}")
            if stack.basic_bits != self.basic_bits:
                raise ValidationError("stack basic width differs from model basic width")
            if stack.shape != spec.weight_shape:
                raise ValidationError(f"stack shape {stack.shape} does not match {spec.weight_shape}")
            if len(bn_row) != self.n + 1:
                raise ValidationError("one BN table per level is required")
            for bn in bn_row:
                if any(np.shape(a) != (spec.out_features,) for a in (bn.mean, bn.var, bn.scale, bn.shift)):
                    raise ValidationError("BN table size does not match layer width")
        if np.shape(self.act_steps) != (m, self.n + 1):
            raise ValidationError(f"act_steps must have shape {(m, self.n + 1)}")
        if m and not (np.asarray(self.act_steps) > 0).all():
            raise ValidationError("activation step sizes must be positive")
        if self.head.weight.shape != (self.arch.num_classes, self.arch.head_features):
            raise ValidationError("head weight shape does not match architecture")
        if (self.stem is None) != (self.arch.stem is None):
            raise ValidationError("stem parameters do not match architecture")
        if self.allocation is not None:
            if len(self.allocation) != m or not all(0 <= i <= self.n for i in self.allocation):
                raise ValidationError("allocation must give one level in [0, n] per layer")
        return self

    @property
    def top_bits(self) -> int:
        return self.basic_bits + self.n
