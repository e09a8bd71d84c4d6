"""Parameter containers shared by the teacher and student models"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import CheckpointError
from .functional import glorot_uniform, layer_norm
from .tensor import Parameter, Tensor


class Module:
    """Base class: discovers Parameters and sub-Modules in attribute order"""

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def parameters(self) -> dict[str, Parameter]:
        found: dict[str, Parameter] = {}
        for name, child in self._children():
            if isinstance(child, Parameter):
                found[name] = child
            else:
                for sub, param in child.parameters().items():
                    found[f"{name}.{sub}"] = param
        return found

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for param in self.parameters().values():
            param.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise CheckpointError(
                f"parameter names do not match model (missing={sorted(missing)}, "
                f"unexpected={sorted(unexpected)})"
            )
        for name, param in params.items():
            if state[name].shape != param.shape:
                raise CheckpointError(
                    f"parameter {name} has shape {state[name].shape}, model expects {param.shape}"
                )
            param.assign(state[name])


class Linear(Module):
    """Affine map x @ W + b with Glorot-uniform weights"""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = Parameter(glorot_uniform(rng, fan_in, fan_out, dtype))
        self.bias = Parameter(np.zeros(fan_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5, dtype=np.float64):
        self.gain = Parameter(np.ones(width, dtype=dtype))
        self.bias = Parameter(np.zeros(width, dtype=dtype))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self._eps)
