"""Learnable resizing front-ends (HFE, GLR) and the static bilinear baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import ClassVar, Optional, Union

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, no_grad
from .layers import BatchNorm, Conv2D, Module, Shape


class ResizerSpecError(ValueError):
    pass


def _ceil_half(n: int) -> int:
    return -(-n // 2)


@dataclass
class HfeSpec:
    """High-dimension feature embedding: two conv units mapping (H, W, 3) to (T, T, unit2_channels).

    ``use_subsampling_pool=None`` picks the pool automatically: it is kept
    only when the stack can still reach T after it (1024 -> 256 keeps it,
    512 and 768 skip it).
    """

    input_size: tuple[int, int, int]
    target_size: int = 256
    unit1_channels: int = 4
    unit2_channels: int = 8
    use_subsampling_pool: Optional[bool] = None
    unit2_norm: bool = True
    kind: ClassVar[str] = "hfe"

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        h, w, _ = self.input_size
        if self.target_size < 1 or self.unit1_channels < 1 or self.unit2_channels < 1:
            raise ResizerSpecError("HFE sizes and channel counts must be positive")
        if self.target_size > h or self.target_size > w:
            raise ResizerSpecError(f"HFE target {self.target_size} larger than input {h}x{w}")

    @property
    def pool(self) -> bool:
        if self.use_subsampling_pool is not None:
            return self.use_subsampling_pool
        h, w, _ = self.input_size
        return min(_ceil_half(_ceil_half(h)), _ceil_half(_ceil_half(w))) >= self.target_size

    def conv_output_hw(self) -> tuple[int, int]:
        """Spatial size after the conv units, before any final resize."""
        h, w, _ = self.input_size
        h, w = _ceil_half(h), _ceil_half(w)
        if self.pool:
            h, w = _ceil_half(h), _ceil_half(w)
        return h, w

    def output_shape(self) -> Shape:
        return self.target_size, self.target_size, self.unit2_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return {"type": self.kind, **d}


@dataclass
class GlrSpec:
    """Bilinear skip plus a learned residual path computed at the target size."""

    input_size: tuple[int, int, int]
    target_size: tuple[int, int] = (224, 224)
    filters: int = 16
    residual_blocks: int = 2
    leaky_slope: float = 0.2
    kind: ClassVar[str] = "glr"

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.target_size = tuple(self.target_size)
        if min(self.target_size) < 1 or self.filters < 1 or self.residual_blocks < 0:
            raise ResizerSpecError("GLR target size and filters must be positive")

    def output_shape(self) -> Shape:
        return self.target_size[0], self.target_size[1], self.input_size[2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["target_size"] = list(self.target_size)
        return {"type": self.kind, **d}


@dataclass
class StaticResizeSpec:
    target_size: tuple[int, int]
    method: str = "bilinear"
    input_size: Optional[tuple[int, int, int]] = field(default=None)
    kind: ClassVar[str] = "static"

    def __post_init__(self):
        self.target_size = tuple(self.target_size)
        if self.input_size is not None:
            self.input_size = tuple(self.input_size)
        if self.method != "bilinear":
            raise ResizerSpecError(f"static resize supports only 'bilinear', got {self.method!r}")

    def output_shape(self) -> Shape:
        channels = self.input_size[2] if self.input_size else 3
        return self.target_size[0], self.target_size[1], channels

    def to_dict(self) -> dict:
        d = {"target_size": list(self.target_size), "method": self.method}
        if self.input_size is not None:
            d["input_size"] = list(self.input_size)
        return {"type": self.kind, **d}


ResizerSpec = Union[HfeSpec, GlrSpec, StaticResizeSpec]


def resizer_from_dict(d: Optional[dict]) -> Optional[ResizerSpec]:
    if d is None:
        return None
    d = dict(d)
    kind = d.pop("type", None)
    classes = {"hfe": HfeSpec, "glr": GlrSpec, "static": StaticResizeSpec}
    if kind not in classes:
        raise ResizerSpecError(f"unknown resizer type {kind!r}; expected one of {sorted(classes)} or null")
    return classes[kind](**d)


# --- modules -------------------------------------------------------------------------------


class HFE(Module):
    def __init__(self, spec: HfeSpec, rng: np.random.Generator):
        self.spec = spec
        cin = spec.input_size[2]
        c1, c2 = spec.unit1_channels, spec.unit2_channels
        self.unit1 = _Unit(Conv2D(cin, c1, 3, rng, stride=1), Conv2D(c1, c1, 3, rng, stride=2), BatchNorm(c1))
        self.unit2 = _Unit(Conv2D(c1, c2, 3, rng), Conv2D(c2, c2, 3, rng), BatchNorm(c2) if spec.unit2_norm else None)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = self.unit1(x, training)
        if self.spec.pool:
            h = ops.max_pool(h, window=3, stride=2, padding="same")
        h = self.unit2(h, training)
        t = self.spec.target_size
        return ops.bilinear_resize(h, t, t)

    def out_shape(self, shape: Shape) -> Shape:
        if tuple(shape) != tuple(self.spec.input_size):
            raise ops.ShapeError(f"HFE built for {self.spec.input_size}, got {shape}")
        self.unit2.out_shape(self.unit1.out_shape(shape))
        return self.spec.output_shape()

    def macs(self, shape: Shape) -> int:
        mid = self.unit1.out_shape(shape)
        total = self.unit1.macs(shape)
        if self.spec.pool:
            mid = (_ceil_half(mid[0]), _ceil_half(mid[1]), mid[2])
        return total + self.unit2.macs(mid)


class _Unit(Module):
    """conv -> conv -> [batch_norm -> relu]"""

    def __init__(self, conv1: Conv2D, conv2: Conv2D, bn: Optional[BatchNorm]):
        self.conv1 = conv1
        self.conv2 = conv2
        if bn is not None:
            self.bn = bn

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = self.conv2(self.conv1(x))
        if hasattr(self, "bn"):
            h = ops.relu(self.bn(h, training))
        return h

    def out_shape(self, shape):
        return self.conv2.out_shape(self.conv1.out_shape(shape))

    def macs(self, shape):
        return self.conv1.macs(shape) + self.conv2.macs(self.conv1.out_shape(shape))


class _GlrResBlock(Module):
    def __init__(self, filters: int, slope: float, rng: np.random.Generator):
        self.conv1 = Conv2D(filters, filters, 3, rng)
        self.bn1 = BatchNorm(filters)
        self.conv2 = Conv2D(filters, filters, 3, rng)
        self.bn2 = BatchNorm(filters)
        self.slope = slope

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = ops.leaky_relu(self.bn1(self.conv1(x), training), self.slope)
        return x + self.bn2(self.conv2(h), training)

    def macs(self, shape):
        return self.conv1.macs(shape) + self.conv2.macs(shape)


class GLR(Module):
    def __init__(self, spec: GlrSpec, rng: np.random.Generator):
        self.spec = spec
        c, f = spec.input_size[2], spec.filters
        self.conv_in = Conv2D(c, f, 7, rng)
        self.conv_mix = Conv2D(f, f, 1, rng)
        self.bn_in = BatchNorm(f)
        self.blocks = [_GlrResBlock(f, spec.leaky_slope, rng) for _ in range(spec.residual_blocks)]
        self.conv_out = Conv2D(f, f, 3, rng)
        self.bn_out = BatchNorm(f)
        self.conv_final = Conv2D(f, c, 7, rng)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        th, tw = self.spec.target_size
        slope = self.spec.leaky_slope
        skip = ops.bilinear_resize(x, th, tw)
        h = ops.leaky_relu(self.conv_in(x), slope)
        h = ops.leaky_relu(self.conv_mix(h), slope)
        r = ops.bilinear_resize(self.bn_in(h, training), th, tw)
        h = r
        for block in self.blocks:
            h = block(h, training)
        h = self.bn_out(self.conv_out(h), training) + r
        return self.conv_final(h) + skip

    def out_shape(self, shape: Shape) -> Shape:
        if shape[2] != self.spec.input_size[2]:
            raise ops.ShapeError(f"GLR built for {self.spec.input_size[2]} channels, got {shape[2]}")
        return self.spec.target_size[0], self.spec.target_size[1], shape[2]

    def macs(self, shape: Shape) -> int:
        f = self.spec.filters
        full = self.conv_in.macs(shape) + self.conv_mix.macs((shape[0], shape[1], f))
        small = (self.spec.target_size[0], self.spec.target_size[1], f)
        return (full + sum(b.macs(small) for b in self.blocks) + self.conv_out.macs(small)
                + self.conv_final.macs(small))


class StaticResize(Module):
    """Non-learned bilinear preprocessing; its output carries no graph."""

    def __init__(self, spec: StaticResizeSpec):
        self.spec = spec

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return static_resize(x, self.spec)

    def out_shape(self, shape: Shape) -> Shape:
        return self.spec.target_size[0], self.spec.target_size[1], shape[2]


def build_hfe(spec: HfeSpec, rng: Optional[np.random.Generator] = None) -> HFE:
    return HFE(spec, rng if rng is not None else np.random.default_rng(0))


def build_glr(spec: GlrSpec, rng: Optional[np.random.Generator] = None) -> GLR:
    return GLR(spec, rng if rng is not None else np.random.default_rng(0))


def static_resize(x: Tensor, spec: StaticResizeSpec) -> Tensor:
    with no_grad():
        data = ops.resize_bilinear_array(x.data, *spec.target_size)
    return Tensor(np.ascontiguousarray(data)) if data is not x.data else Tensor(x.data)


def build_resizer(spec: Optional[ResizerSpec], rng: np.random.Generator) -> Optional[Module]:
    if spec is None:
        return None
    if isinstance(spec, HfeSpec):
        return build_hfe(spec, rng)
    if isinstance(spec, GlrSpec):
        return build_glr(spec, rng)
    if isinstance(spec, StaticResizeSpec):
        return StaticResize(spec)
    raise TypeError(f"unsupported resizer spec {type(spec).__name__}")
