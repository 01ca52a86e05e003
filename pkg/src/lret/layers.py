"""Parameterised layers and the small module system the models are built from.

Modules only hold parameters and buffers; the computation lives in
:mod:`lret.autodiff.ops`.  Every module can report its output shape and
multiply-accumulate count for a given input shape without running.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Parameter, Tensor, default_dtype

Shape = tuple[int, int, int]  # (H, W, C); batch axis is implicit


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")
        yield from ((prefix + k, v) for k, v in self._buffers().items())

    def _buffers(self) -> dict[str, np.ndarray]:
        return {}

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def out_shape(self, shape: Shape) -> Shape:
        raise NotImplementedError

    def macs(self, shape: Shape) -> int:
        return 0


class Conv2D(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1):
        self.kernel = Parameter(kaiming_uniform(rng, (kernel, kernel, cin, cout), kernel * kernel * cin))
        self.bias = Parameter(np.zeros(cout, dtype=default_dtype()))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.kernel, self.bias, stride=self.stride, padding="same")

    def out_shape(self, shape: Shape) -> Shape:
        h, w, c = shape
        k, _, cin, cout = self.kernel.shape
        if c != cin:
            raise ops.ShapeError(f"expects {cin} input channels, got {c}")
        return -(-h // self.stride), -(-w // self.stride), cout

    def macs(self, shape: Shape) -> int:
        ho, wo, cout = self.out_shape(shape)
        kh, kw, cin, _ = self.kernel.shape
        return ho * wo * kh * kw * cin * cout


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(channels, dtype=default_dtype()))
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())
        self.updates = np.zeros(1, dtype=default_dtype())
        self.momentum = momentum
        self.eps = eps

    def _buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var, "updates": self.updates}

    def effective_momentum(self) -> float:
        """Warm-up: the first 1/(1-momentum) updates are an exact cumulative average.

        A plain EMA at 0.99 is still two-thirds initial value after 40 steps,
        which ruins inference on short desk-scale runs.
        """
        t = float(self.updates[0]) + 1
        return min(self.momentum, 1.0 - 1.0 / t)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        m = self.momentum
        if training:
            m = self.effective_momentum()
            self.updates += 1
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training, m, self.eps)

    def out_shape(self, shape):
        return shape


class Dense(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        self.weight = Parameter(kaiming_uniform(rng, (din, dout), din))
        self.bias = Parameter(np.zeros(dout, dtype=default_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)

    def macs(self, shape) -> int:
        return int(np.prod(self.weight.shape))


def check_finite(t: Tensor, layer: str) -> Tensor:
    from .autodiff.tensor import NonFiniteError

    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"non-finite activation at layer {layer!r}")
    return t


def set_buffer(module: Module, name: str, value: np.ndarray) -> None:
    """Overwrite a named buffer in place (used when restoring checkpoints)."""
    for key, buf in module.named_buffers():
        if key == name:
            if buf.shape != value.shape:
                raise ValueError(f"buffer {name}: shape {value.shape} != {buf.shape}")
            buf[...] = value
            return
    raise KeyError(name)


def find_parameter(module: Module, name: str) -> Optional[Parameter]:
    for key, p in module.named_parameters():
        if key == name:
            return p
    return None
