"""Parameter containers: a small Module tree with named parameters."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Base class; sub-modules and parameters are discovered from attributes."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and getattr(value, "is_param", False):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and getattr(item, "is_param", False):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for k in sorted(value):
                    item = value[k]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
                    elif isinstance(item, Tensor) and getattr(item, "is_param", False):
                        yield f"{name}.{k}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            items = value.values() if isinstance(value, dict) else value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
            p.data = value.copy()


def parameter(data, name: str | None = None) -> Tensor:
    t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
    t.is_param = True
    return t


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        # uniform fan-in init, as in common deep learning frameworks
        bound = 1.0 / np.sqrt(n_in)
        self.W = parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.b = parameter(rng.uniform(-bound, bound, size=n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.dense(x, self.W, self.b)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = F.LAYER_NORM_EPS):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)
