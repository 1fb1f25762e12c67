"""Named parameter store with SGD (momentum, weight decay), RMSProp and Adam updates."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .core import Tensor


class ParamStore:
    """Named parameters plus per-parameter optimizer slots."""

    def __init__(self, named_params):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, p in named_params:
            if name in self.params:
                raise KeyError(f"duplicate parameter name {name!r}")
            self.params[name] = p
        self.slots: dict[str, dict[str, np.ndarray]] = {name: {} for name in self.params}

    @classmethod
    def from_module(cls, module) -> "ParamStore":
        return cls(module.named_parameters())

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads_finite(self) -> bool:
        return all(p.grad is None or np.all(np.isfinite(p.grad)) for p in self.params.values())

    def slot_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, slots in self.slots.items():
            for key, arr in slots.items():
                out[f"{name}@{key}"] = arr
        return out

    def load_slot_arrays(self, arrays: dict) -> None:
        for full, arr in arrays.items():
            name, key = full.rsplit("@", 1)
            self.slots[name][key] = np.array(arr)


def sgd_step(store: ParamStore, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v."""
    for name, p in store:
        if p.grad is None:
            continue
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        if momentum:
            buf = store.slots[name].get("momentum")
            if buf is None:
                buf = np.zeros_like(p.data)
                store.slots[name]["momentum"] = buf
            buf *= momentum
            buf += g
            g = buf
        p.data -= lr * g


def rmsprop_step(store: ParamStore, lr: float, eps: float = 1e-8, alpha: float = 0.99) -> None:
    """s <- alpha * s + (1 - alpha) g^2;  p <- p - lr * g / (sqrt(s) + eps)."""
    for name, p in store:
        if p.grad is None:
            continue
        sq = store.slots[name].get("square_avg")
        if sq is None:
            sq = np.zeros_like(p.data)
            store.slots[name]["square_avg"] = sq
        sq *= alpha
        sq += (1 - alpha) * p.grad * p.grad
        p.data -= lr * p.grad / (np.sqrt(sq) + eps)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam; weight decay is added to the gradient as in ``sgd_step``."""
    for name, p in store:
        if p.grad is None:
            continue
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        slots = store.slots[name]
        if "adam_m" not in slots:
            slots["adam_m"] = np.zeros_like(p.data)
            slots["adam_v"] = np.zeros_like(p.data)
            slots["adam_t"] = np.zeros(1, dtype=np.int64)
        m, v, t = slots["adam_m"], slots["adam_v"], slots["adam_t"]
        t += 1
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** int(t[0]))
        vhat = v / (1 - beta2 ** int(t[0]))
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype, copy=False)
