"""Small parameter containers built on :mod:`sgalign.numerics.tensor`."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Anything that owns named parameters, possibly through child modules."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{name}.{i}."))
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{name}.{k}."))
        return out


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True):
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.bias = param(rng.uniform(-bound, bound, size=(fan_out,))) if bias else None

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def numpy_forward(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weight.data
        if self.bias is not None:
            y += self.bias.data
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = param(np.ones(dim))
        self.shift = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, axis=-1, eps=self.eps) * self.gain + self.shift
