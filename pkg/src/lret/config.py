"""Run configuration: one JSON document describing model, training, data and outputs.

Every validation error names the offending JSON path, e.g.
``$.train.optimizer.lr: must be > 0``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .data.loader import LoaderConfig
from .data.synth import SynthSpec
from .explain import METHODS
from .model import BackboneSpec, ModelSpec
from .resizers import GlrSpec, HfeSpec, StaticResizeSpec
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DatasetConfig:
    manifest: Optional[str] = None
    synth: Optional[SynthSpec] = None

    def __post_init__(self):
        if self.manifest is not None and self.synth is not None:
            raise ValueError("give either 'manifest' or 'synth', not both")


@dataclass
class EvalConfig:
    split: str = "test"
    tau: Optional[float] = None
    group_map: Optional[str] = None

    def __post_init__(self):
        if self.tau is not None and not 0 < self.tau < 1:
            raise ValueError("tau must be in (0, 1)")


@dataclass
class ExplainConfig:
    method: str = "gradcam"
    layer_res: int = 32
    images: list = field(default_factory=list)
    limit: int = 8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method {self.method!r} unknown; expected one of {{{', '.join(METHODS)}}}")
        if self.layer_res not in (8, 16, 32, 64):
            raise ValueError("layer_res must be one of 8, 16, 32, 64")


@dataclass
class FeaturesConfig:
    avg_k: int = 3
    tsne: bool = False
    perplexity: float = 40.0
    iterations: int = 300
    splits: list = field(default_factory=lambda: ["train", "test"])

    def __post_init__(self):
        if self.avg_k < 1 or self.iterations < 1 or self.perplexity <= 0:
            raise ValueError("avg_k and iterations must be >= 1 and perplexity > 0")


@dataclass
class BenchConfig:
    split: str = "train"
    epochs: int = 2
    latency_ms: float = 5.0
    consumer_ms: float = 0.0
    cache: list = field(default_factory=lambda: [True, False])
    workers: list = field(default_factory=lambda: [2])
    prefetch: list = field(default_factory=lambda: [2])

    def __post_init__(self):
        if self.epochs < 1 or self.latency_ms < 0 or self.consumer_ms < 0:
            raise ValueError("epochs must be >= 1 and times >= 0")
        if not self.cache or not self.workers or not self.prefetch:
            raise ValueError("cache, workers and prefetch need at least one value")


@dataclass
class RunConfig:
    """``model`` is a partial ModelSpec dict; input size, class count and channel plumbing are filled in
    from the dataset when the model is built (see :func:`resolve_model_spec`)."""

    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    loader: LoaderConfig = field(default_factory=LoaderConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    outputs: Optional[str] = None

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    return obj


# --- generic typed construction --------------------------------------------------------------------


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _convert(value: Any, tp, path: str):
    origin = typing.get_origin(tp)
    if tp is Any:
        return value
    if origin is Union or isinstance(tp, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(path, "must not be null")
        rest = [a for a in args if a is not type(None)]
        if len(rest) == 1:
            return _convert(value, rest[0], path)
        return value
    if value is None:
        raise ConfigError(path, f"must be {_type_name(tp)}, got null")
    if dataclasses.is_dataclass(tp):
        return build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"must be a boolean, got {json.dumps(value)}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"must be an integer, got {json.dumps(value)}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"must be a number, got {json.dumps(value)}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"must be a string, got {json.dumps(value)}")
        return value
    if tp in (list, tuple) or origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(path, f"must be a list, got {json.dumps(value)}")
        args = typing.get_args(tp)
        if args and args[-1] is not Ellipsis and len(args) == len(value) and origin is tuple:
            return tuple(_convert(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
        inner = args[0] if args else Any
        out = [_convert(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
        return tuple(out) if (tp is tuple or origin is tuple) else out
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"must be an object, got {json.dumps(value)}")
        return dict(value)
    return value


def build(cls, data: Any, path: str = "$", **fixed):
    """Construct dataclass ``cls`` from a JSON object, rejecting unknown keys and wrong types."""
    if not isinstance(data, dict):
        raise ConfigError(path, f"must be an object, got {json.dumps(data)}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", f"unknown field; expected one of {names}")
    kwargs = {k: _convert(v, hints[k], f"{path}.{k}") for k, v in data.items()}
    kwargs.update(fixed)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        first = msg.split(" ", 1)[0]
        if first in names:  # messages of the form "<field> must ..." point at that field
            raise ConfigError(f"{path}.{first}", msg.split(" ", 1)[1]) from None
        raise ConfigError(path, msg) from None


def parse_config(data: Any) -> RunConfig:
    cfg = build(RunConfig, data)
    if not isinstance(cfg.model, dict):
        raise ConfigError("$.model", "must be an object")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("$", f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(data)


# --- model spec resolution --------------------------------------------------------------------------

_RESIZERS = {"hfe": HfeSpec, "glr": GlrSpec, "static": StaticResizeSpec}


def _default_target(input_size) -> int:
    return max(1, min(256, min(input_size[:2]) // 4))


def default_channels(side: int, stem_stride: int = 2) -> tuple[int, ...]:
    """Default stage widths, dropping trailing stages so the final map stays at least 2x2."""
    full = BackboneSpec().channels
    n = 0
    size = side / stem_stride
    while n < len(full) and size / 2 >= 2:
        size /= 2
        n += 1
    return full[:max(n, 1)]


def resolve_model_spec(raw: dict, input_size, num_classes: int, resizer: Optional[str] = None,
                       target: Optional[int] = None) -> ModelSpec:
    """Complete a partial model dict with dataset-derived geometry.

    ``resizer`` (``hfe``/``glr``/``static``/``none``) and ``target`` override
    the config's resizer.  The backbone input channel count follows the
    resizer output unless given explicitly.
    """
    raw = dict(raw)
    input_size = raw.pop("input_size", input_size)
    if not (isinstance(input_size, (list, tuple)) and len(input_size) == 3
            and all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in input_size)):
        raise ConfigError("$.model.input_size", "must be [height, width, channels] of positive integers")
    input_size = tuple(input_size)
    num_classes = raw.pop("num_classes", num_classes)
    res = raw.pop("resizer", {"type": "hfe"})
    if resizer is not None:
        res = None if resizer == "none" else {"type": resizer}
    if res is not None:
        if not isinstance(res, dict):
            raise ConfigError("$.model.resizer", "must be an object or null")
        res = dict(res)
        kind = res.pop("type", None)
        if kind not in _RESIZERS:
            raise ConfigError("$.model.resizer.type", f"unknown resizer {kind!r}; expected one of "
                                                      f"{sorted(_RESIZERS) + ['none']}")
        if target is not None:
            res["target_size"] = target if kind == "hfe" else [target, target]
        elif kind == "hfe" and "target_size" not in res:
            res["target_size"] = _default_target(input_size)
        res.setdefault("input_size", list(input_size))
        if kind == "static" and "target_size" not in res:
            raise ConfigError("$.model.resizer.target_size", "required for a static resizer")
        spec = build(_RESIZERS[kind], res, "$.model.resizer")
    else:
        spec = None
    backbone = dict(raw.pop("backbone", {}))
    backbone.setdefault("input_channels", spec.output_shape()[2] if spec is not None else input_size[2])
    if "channels" not in backbone:
        # without a resizer, keep the backbone the default HFE front-end would get so the
        # no-resizer ablation differs only in its input resolution
        side = min(spec.output_shape()[:2]) if spec is not None else _default_target(input_size)
        backbone["channels"] = list(default_channels(side, backbone.get("stem_stride", 2)))
    bb = build(BackboneSpec, backbone, "$.model.backbone")
    raw.setdefault("head_width", bb.channels[-1])
    unknown = sorted(set(raw) - {"head_width", "dropout_rate", "head_activation", "feature_map_size"})
    if unknown:
        raise ConfigError(f"$.model.{unknown[0]}", "unknown field")
    try:
        return ModelSpec(input_size=input_size, num_classes=num_classes, resizer=spec, backbone=bb, **raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("$.model", str(exc)) from None


__all__ = ["BenchConfig", "ConfigError", "DatasetConfig", "EvalConfig", "ExplainConfig", "FeaturesConfig",
           "RunConfig", "build", "default_channels", "load_config", "parse_config", "resolve_model_spec"]
