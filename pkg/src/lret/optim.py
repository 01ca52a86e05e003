"""Adam optimiser over named parameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff.tensor import NonFiniteError, Parameter


@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must be in [0, 1)")

    def to_dict(self):
        return asdict(self)


def adam_step(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, cfg: AdamConfig):
    """One bias-corrected Adam update; returns new ``(theta, m, v)``."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    if theta.shape != grad.shape or m.shape != grad.shape or v.shape != grad.shape:
        raise ValueError("Adam shapes disagree")
    m = cfg.beta1 * m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    theta = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return theta, m, v


class Adam:
    def __init__(self, named_params, cfg: AdamConfig | None = None):
        self.cfg = cfg or AdamConfig()
        self.params: dict[str, Parameter] = {n: p for n, p in named_params if p.trainable}
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            if not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        for name, p in self.params.items():
            theta, m, v = adam_step(p.data, p.grad, self.m[name], self.v[name], self.t, self.cfg)
            p.data = theta.astype(p.data.dtype, copy=False)
            self.m[name] = m.astype(p.data.dtype, copy=False)
            self.v[name] = v.astype(p.data.dtype, copy=False)
