"""Adam with element-wise gradient clamping and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autograd import Tensor

__all__ = ["OptimizerConfig", "Parameter", "adam_step", "zero_grads"]


@dataclass
class OptimizerConfig:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValueError("epsilon and grad_clip must be positive, weight_decay non-negative")


class Parameter:
    """Named trainable array with its Adam moment estimates."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.adam_m = np.zeros_like(self.value.data)
        self.adam_v = np.zeros_like(self.value.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.data.shape})"


def adam_step(params: Iterable[Parameter], config: OptimizerConfig) -> None:
    """One bias-corrected Adam update over ``params``.

    Gradients are clamped element-wise to [-grad_clip, +grad_clip] before the
    moment updates; weight decay is decoupled (applied to the value directly,
    never through the moments).  Parameters with no gradient only decay.
    """
    lr = config.learning_rate
    for p in params:
        g = p.value.grad
        if g is None:
            g = np.zeros_like(p.value.data)
        g = np.clip(g, -config.grad_clip, config.grad_clip)
        p.adam_m *= config.beta1
        p.adam_m += (1.0 - config.beta1) * g
        p.adam_v *= config.beta2
        p.adam_v += (1.0 - config.beta2) * (g * g)
        p.step_count += 1
        m_hat = p.adam_m / (1.0 - config.beta1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - config.beta2 ** p.step_count)
        p.value.data -= lr * (config.weight_decay * p.value.data
                              + m_hat / (np.sqrt(v_hat) + config.epsilon))


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
