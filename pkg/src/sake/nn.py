"""Small feed-forward building blocks on top of :mod:`sake.tensor`."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor] | None] = {
    "silu": T.silu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "celu": T.celu,
    "none": None,
}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


class Module:
    """Anything holding named parameters, possibly nested."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Dense(Module):
    def __init__(self, rng, fan_in: int, fan_out: int, activation: str = "silu", bias: bool = True):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weight = glorot(rng, fan_in, fan_out)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None
        self.activation = activation

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        act = ACTIVATIONS[self.activation]
        return y if act is None else act(y)


class MLP(Module):
    def __init__(self, rng, sizes: list[int], activation: str = "silu", last_activation: str = "silu"):
        acts = [activation] * (len(sizes) - 2) + [last_activation]
        self.layers = [Dense(rng, a, b, act) for a, b, act in zip(sizes[:-1], sizes[1:], acts)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
