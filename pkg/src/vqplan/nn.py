"""Small dense-network building blocks on top of :mod:`vqplan.diffcore`."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import diffcore as dc

ACTIVATIONS: dict[str, Callable] = {
    "tanh": dc.tanh,
    "relu": dc.relu,
    "linear": lambda x: x,
}


class ParamSet:
    """Named collection of trainable tensors."""

    def __init__(self):
        self.params: dict[str, dc.Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> dc.Tensor:
        t = dc.Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> dc.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def items(self):
        return self.params.items()

    def values(self):
        return list(self.params.values())

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.value.copy() for k, v in self.params.items()}

    def load(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, t in self.params.items():
            arr = np.asarray(state[prefix + k], dtype=np.float64)
            if arr.shape != t.shape:
                raise dc.ContractError(f"checkpoint shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.value = arr.copy()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class MLP:
    """Fully connected stack ``x -> act(x W1 + b1) -> ... -> x Wk + bk``."""

    def __init__(self, params: ParamSet, prefix: str, sizes: list[int], rng: np.random.Generator,
                 activation: str = "tanh", zero_last: bool = False):
        self.prefix = prefix
        self.sizes = list(sizes)
        self.activation = ACTIVATIONS[activation]
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            w = np.zeros((a, b)) if (zero_last and last) else glorot(rng, a, b)
            W = params.add(f"{prefix}.w{i}", w)
            bias = params.add(f"{prefix}.b{i}", np.zeros(b))
            self.layers.append((W, bias))

    def __call__(self, x) -> dc.Tensor:
        h = dc.as_tensor(x)
        for i, (W, b) in enumerate(self.layers):
            h = h @ W + b
            if i < len(self.layers) - 1:
                h = self.activation(h)
        return h


def cosine_lr(base: float, step: int, total: int, floor: float = 0.05) -> float:
    """Cosine decay from ``base`` to ``floor * base`` over ``total`` steps."""
    frac = min(max(step - 1, 0) / max(total - 1, 1), 1.0)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))


class Adam:
    def __init__(self, params: list[dc.Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def step(self, grads: dict) -> float:
        gs = [grads[p] for p in self.params]
        norm = float(np.sqrt(np.sum([np.sum(g * g) for g in gs])))
        if self.clip_norm is not None and norm > self.clip_norm:
            gs = [g * (self.clip_norm / norm) for g in gs]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, gs, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm
