"""Parameterised layers built from the tensor primitives."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import core as T
from .spatial import batchnorm2d, conv2d


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, T.Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, T.Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[T.Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data) for k, p in self.named_parameters())
        state.update((k, b) for k, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise T.ShapeError(f"{k}: stored shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)
        for k, b in buffers.items():
            b[...] = state[k]

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> T.Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, (n_out, n_in), n_in)
        self.bias = T.Tensor(np.zeros(n_out), requires_grad=True)

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, pad: int | None = None):
        self.weight = _uniform(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = T.Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = T.Tensor(np.ones(channels), requires_grad=True)
        self.beta = T.Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.weight = T.Tensor(rng.normal(0.0, 1.0, size=(n, dim)), requires_grad=True)

    def forward(self, idx):
        return self.weight[np.asarray(idx, dtype=int)]


class GRUCell(Module):
    """Dense GRU; ``h' = (1 - z) * n + z * h`` so a saturated update gate keeps the state."""

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator):
        self.x2h = Linear(n_in, 3 * n_hidden, rng)
        self.h2h = Linear(n_hidden, 3 * n_hidden, rng)
        self.n_hidden = n_hidden

    def forward(self, x, h):
        k = self.n_hidden
        gx = self.x2h(x)
        gh = self.h2h(h)
        r = T.sigmoid(gx[:, :k] + gh[:, :k])
        z = T.sigmoid(gx[:, k:2 * k] + gh[:, k:2 * k])
        n = T.tanh(gx[:, 2 * k:] + r * gh[:, 2 * k:])
        return (1 - z) * n + z * h


class ConvGRUCell(Module):
    """GRU whose input and state transforms are 3x3 convolutions over a feature map."""

    def __init__(self, c_in: int, c_hidden: int, rng: np.random.Generator, k: int = 3):
        self.x2h = Conv2d(c_in, 3 * c_hidden, k, rng)
        self.h2h = Conv2d(c_hidden, 3 * c_hidden, k, rng)
        self.c_hidden = c_hidden

    def forward(self, x, h):
        k = self.c_hidden
        gx = self.x2h(x)
        gh = self.h2h(h)
        r = T.sigmoid(gx[:, :k] + gh[:, :k])
        z = T.sigmoid(gx[:, k:2 * k] + gh[:, k:2 * k])
        n = T.tanh(gx[:, 2 * k:] + r * gh[:, 2 * k:])
        return (1 - z) * n + z * h
