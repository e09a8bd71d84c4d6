"""Adam with bias correction and global-norm gradient clipping"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ShapeError
from .tensor import Parameter


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter"""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Return updated parameter arrays; moments in ``state`` advance in place"""
    if set(params) != set(grads):
        raise ShapeError("parameters and gradients must have the same names")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step

    updated: dict[str, np.ndarray] = {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, expected {value.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        updated[name] = (value - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            value.dtype, copy=False
        )
    return updated


def clip_grad_norm(params: Mapping[str, Parameter], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``"""
    total = float(
        np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))
    )
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Adam:
    """Optimizer bound to a model's named parameters"""

    def __init__(
        self,
        params: Mapping[str, Parameter],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.state = AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        # parameters that received no gradient this step are treated as zero-gradient
        values = {name: p.data for name, p in self.params.items()}
        grads = {
            name: p.grad if p.grad is not None else np.zeros_like(p.data)
            for name, p in self.params.items()
        }
        for name, value in adam_step(self.state, values, grads).items():
            self.params[name].assign(value)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
