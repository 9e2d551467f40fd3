"""Parameters, a minimal module tree, and the standard layers built on the kernels."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A trainable leaf tensor.

    ``decay`` marks whether decoupled weight decay applies; gains, biases and
    scalar temperatures are created with ``decay=False``.
    """

    __slots__ = ("name", "decay")

    def __init__(self, data, decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.name = ""
        self.decay = decay


class Module:
    """Parameter container; attributes that are Parameters, Modules or lists of Modules are walked."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        """Parameters with their ``name`` fields set to their path in the tree."""
        out = []
        seen = set()
        for name, p in self.named_parameters():
            if id(p) in seen:
                raise ValueError(f"parameter {name} registered twice")
            seen.add(id(p))
            p.name = name
            out.append(p)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into parameters. Returns keys in ``state`` that this module ignores."""
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"state is missing parameters: {missing}")
        unexpected = sorted(set(state) - set(own))
        if strict and unexpected:
            raise KeyError(f"unexpected parameters in state: {unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, found {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
        return unexpected

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def to_dtype(self, dtype) -> None:
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for value in vars(self).values():
            children = value if isinstance(value, (list, tuple)) else [value]
            for child in children:
                if isinstance(child, Module):
                    child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(_uniform(rng, (n_in, n_out), bound))
        self.bias = Parameter(np.zeros(n_out), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim), decay=False)
        self.bias = Parameter(np.zeros(dim), decay=False)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    """3x3-style convolution on channels-last input; He-uniform initialisation."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True):
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(_uniform(rng, (kernel, kernel, c_in, c_out), math.sqrt(6.0 / fan_in)))
        self.bias = Parameter(np.zeros(c_out), decay=False) if bias else None
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = Parameter((rng.standard_normal((n, dim)) * std).astype(get_default_dtype()))

    def forward(self, ids) -> Tensor:
        return ops.embedding(self.weight, ids)
