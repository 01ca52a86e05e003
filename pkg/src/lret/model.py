"""End-to-end classifier: resizer -> mini-backbone (FEN) -> GAP -> dense head -> softmax."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor
from .layers import BatchNorm, Conv2D, Dense, Module, Shape, check_finite
from .resizers import GlrSpec, HfeSpec, ResizerSpec, StaticResizeSpec, build_resizer, resizer_from_dict


class ShapeContractError(ValueError):
    pass


@dataclass
class BackboneSpec:
    """Stem (3x3 conv, stride ``stem_stride``) then one stride-2 stage per entry of ``channels``."""

    input_channels: int = 8
    channels: tuple[int, ...] = (16, 32, 64, 64)
    blocks_per_stage: int = 1
    block_type: str = "residual"
    stem_stride: int = 2

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.block_type not in ("residual", "plain"):
            raise ValueError(f"block_type must be 'residual' or 'plain', got {self.block_type!r}")
        if not self.channels or min(self.channels) < 1 or self.blocks_per_stage < 1:
            raise ValueError("backbone needs at least one stage with positive channels and blocks")

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def downsampling(self) -> int:
        return self.stem_stride * 2 ** self.stages

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class ModelSpec:
    input_size: tuple[int, int, int]
    num_classes: int
    resizer: Optional[ResizerSpec] = None
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    head_width: int = 512
    dropout_rate: float = 0.5
    head_activation: bool = True
    feature_map_size: Optional[tuple[int, int, int]] = None

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        if self.feature_map_size is not None:
            self.feature_map_size = tuple(self.feature_map_size)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "num_classes": self.num_classes,
            "resizer": self.resizer.to_dict() if self.resizer is not None else None,
            "backbone": self.backbone.to_dict(),
            "head_width": self.head_width,
            "dropout_rate": self.dropout_rate,
            "head_activation": self.head_activation,
            "feature_map_size": list(self.feature_map_size) if self.feature_map_size else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["resizer"] = resizer_from_dict(d.get("resizer"))
        d["backbone"] = BackboneSpec(**d.get("backbone", {}))
        return cls(**d)

    @property
    def resizer_name(self) -> str:
        return "none" if self.resizer is None else self.resizer.kind


# --- backbone ------------------------------------------------------------------------------------


class ResidualBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator, residual: bool = True):
        self.conv1 = Conv2D(cin, cout, 3, rng, stride=stride)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv2D(cout, cout, 3, rng)
        self.bn2 = BatchNorm(cout)
        self.residual = residual
        if residual and (cin != cout or stride != 1):
            self.proj = Conv2D(cin, cout, 1, rng, stride=stride)
            self.proj_bn = BatchNorm(cout)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        if self.residual:
            h = h + (self.proj_bn(self.proj(x), training) if hasattr(self, "proj") else x)
        return ops.relu(h)

    def out_shape(self, shape):
        return self.conv2.out_shape(self.conv1.out_shape(shape))

    def macs(self, shape):
        total = self.conv1.macs(shape) + self.conv2.macs(self.conv1.out_shape(shape))
        if hasattr(self, "proj"):
            total += self.proj.macs(shape)
        return total


class Backbone(Module):
    def __init__(self, spec: BackboneSpec, rng: np.random.Generator):
        self.spec = spec
        c0 = spec.channels[0]
        self.stem = Conv2D(spec.input_channels, c0, 3, rng, stride=spec.stem_stride)
        self.stem_bn = BatchNorm(c0)
        stages = []
        cin = c0
        for cout in spec.channels:
            blocks = [ResidualBlock(cin if b == 0 else cout, cout, 2 if b == 0 else 1, rng,
                                    residual=spec.block_type == "residual")
                      for b in range(spec.blocks_per_stage)]
            stages.append(_Stage(blocks))
            cin = cout
        self.stages = stages

    def __call__(self, x: Tensor, training: bool, taps: dict) -> Tensor:
        h = check_finite(ops.relu(self.stem_bn(self.stem(x), training)), "backbone.stem")
        taps["stem"] = h
        for i, stage in enumerate(self.stages, start=1):
            for j, block in enumerate(stage.blocks):
                h = check_finite(block(h, training), f"backbone.stages.{i - 1}.blocks.{j}")
            taps[f"stage{i}"] = h
        return h

    def out_shape(self, shape: Shape) -> Shape:
        if shape[2] != self.spec.input_channels:
            raise ShapeContractError(f"layer 'backbone.stem' expects {self.spec.input_channels} channels, got {shape[2]}")
        shape = self.stem.out_shape(shape)
        for stage in self.stages:
            for block in stage.blocks:
                shape = block.out_shape(shape)
        return shape

    def stage_shapes(self, shape: Shape) -> dict[str, Shape]:
        out = {}
        shape = self.stem.out_shape(shape)
        out["stem"] = shape
        for i, stage in enumerate(self.stages, start=1):
            for block in stage.blocks:
                shape = block.out_shape(shape)
            out[f"stage{i}"] = shape
        return out

    def macs(self, shape: Shape) -> int:
        total = self.stem.macs(shape)
        shape = self.stem.out_shape(shape)
        for stage in self.stages:
            for block in stage.blocks:
                total += block.macs(shape)
                shape = block.out_shape(shape)
        return total


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks


# --- full model ------------------------------------------------------------------------------------


@dataclass
class ForwardOutput:
    logits: Tensor
    probs: np.ndarray
    taps: dict[str, Tensor]


class Model(Module):
    """A built classifier.  Parameters are mutated only by the optimizer."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.resizer = build_resizer(spec.resizer, rng)
        self.backbone = Backbone(spec.backbone, rng)
        fc = spec.backbone.channels[-1]
        self.head = _Head(Dense(fc, spec.head_width, rng), Dense(spec.head_width, spec.num_classes, rng))
        self._dropout_rng = np.random.default_rng(seed + 1)
        self.assign_names()

    def _children(self):
        if self.resizer is not None:
            yield self.spec.resizer.kind, self.resizer
        yield "backbone", self.backbone
        yield "head", self.head

    def named_parameters(self, prefix: str = ""):
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = ""):
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    @property
    def backbone_input_shape(self) -> Shape:
        if self.resizer is None:
            return self.spec.input_size
        return self.resizer.out_shape(self.spec.input_size)

    @property
    def fen_shape(self) -> Shape:
        return self.backbone.out_shape(self.backbone_input_shape)

    @property
    def tap_equivalents(self) -> dict[int, str]:
        """Map the reference feature resolutions {8, 16, 32, 64} onto stage taps.

        The last stage (the FEN map) stands for 8x8, the one before it for
        16x16, and so on, whatever the actual spatial sizes are.
        """
        n = self.spec.backbone.stages
        return {8 * 2 ** k: f"stage{n - k}" for k in range(min(n, 4))}

    def tap_shapes(self) -> dict[str, Shape]:
        shapes = {}
        if self.resizer is not None:
            shapes["resizer"] = self.backbone_input_shape
        shapes.update(self.backbone.stage_shapes(self.backbone_input_shape))
        shapes["fen"] = self.fen_shape
        return shapes

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, batch, training: bool = False, rng: Optional[np.random.Generator] = None) -> ForwardOutput:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_size):
            raise ShapeContractError(f"model expects batches of shape (N, {', '.join(map(str, self.spec.input_size))}),"
                                     f" got {x.shape}")
        taps: dict[str, Tensor] = {}
        if self.resizer is not None:
            x = check_finite(self.resizer(x, training), f"resizer.{self.spec.resizer.kind}")
            taps["resizer"] = x
        fen = self.backbone(x, training, taps)
        taps["fen"] = fen
        features = ops.global_avg_pool(fen)
        taps["features"] = features
        logits = self.head(features, training, self.spec, rng or self._dropout_rng)
        check_finite(logits, "head")
        return ForwardOutput(logits, ops.softmax(logits.data.astype(np.float64)), taps)

    __call__ = forward


class _Head(Module):
    def __init__(self, hidden: Dense, out: Dense):
        self.hidden = hidden
        self.out = out

    def __call__(self, features: Tensor, training: bool, spec: ModelSpec, rng) -> Tensor:
        h = self.hidden(features)
        if spec.head_activation:
            h = ops.relu(h)
        h = ops.dropout(h, spec.dropout_rate, training, rng)
        return self.out(h)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Build and validate a model against the shape contract.

    Raises :class:`ShapeContractError` naming the first layer whose input
    does not fit.
    """
    if spec.resizer is not None and getattr(spec.resizer, "input_size", None) not in (None, spec.input_size):
        raise ShapeContractError(f"layer 'resizer' built for input {spec.resizer.input_size}, model input is {spec.input_size}")
    if isinstance(spec.resizer, StaticResizeSpec) and spec.resizer.input_size is None:
        spec.resizer.input_size = spec.input_size
    model = Model(spec, seed)
    try:
        rshape = model.backbone_input_shape
    except ops.ShapeError as exc:
        raise ShapeContractError(f"layer 'resizer': {exc}") from exc
    if rshape[2] != spec.backbone.input_channels:
        raise ShapeContractError(f"layer 'backbone.stem' expects {spec.backbone.input_channels} channels but the "
                                 f"{spec.resizer_name} resizer emits {rshape[2]}")
    fen = model.backbone.out_shape(rshape)
    factor = spec.backbone.downsampling
    if fen[0] * factor != rshape[0] or fen[1] * factor != rshape[1]:
        raise ShapeContractError(f"layer 'backbone': input {rshape[0]}x{rshape[1]} is not divisible by the "
                                 f"downsampling factor {factor}")
    if spec.feature_map_size is not None and tuple(spec.feature_map_size) != tuple(fen):
        raise ShapeContractError(f"layer 'backbone.stages.{spec.backbone.stages - 1}' emits {fen}, "
                                 f"feature_map_size contract is {spec.feature_map_size}")
    return model


def count_params(model: Module, trainable_only: bool = True) -> int:
    return int(sum(p.data.size for p in model.parameters() if p.trainable or not trainable_only))


def estimate_flops(model: Model, input_shape: Optional[Shape] = None) -> int:
    """Multiply-accumulates of every conv and dense layer for one image."""
    shape = tuple(input_shape or model.spec.input_size)
    total = 0
    if model.resizer is not None:
        total += model.resizer.macs(shape)
        shape = model.resizer.out_shape(shape)
    total += model.backbone.macs(shape)
    total += model.head.hidden.macs(None) + model.head.out.macs(None)
    return int(total)


def hfe_model_spec(input_size: int, target: int, num_classes: int, channels=(16, 32, 64, 64), head_width=None,
                   **kwargs) -> ModelSpec:
    """Convenience: HFE resizer in front of the default mini-backbone."""
    return ModelSpec(
        input_size=(input_size, input_size, 3),
        num_classes=num_classes,
        resizer=HfeSpec((input_size, input_size, 3), target),
        backbone=BackboneSpec(input_channels=8, channels=tuple(channels)),
        head_width=head_width or channels[-1],
        **kwargs,
    )


__all__ = [
    "BackboneSpec", "ForwardOutput", "GlrSpec", "HfeSpec", "Model", "ModelSpec", "ShapeContractError",
    "StaticResizeSpec", "build_model", "count_params", "estimate_flops", "hfe_model_spec",
]
