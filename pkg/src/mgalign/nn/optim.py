from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with L2 weight decay folded into the gradient.

    Parameters whose ``requires_grad`` is False (frozen) or whose gradient is
    ``None`` are skipped, so a frozen module is left byte-identical.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        active = [i for i, p in enumerate(self.params) if p.requires_grad and p.grad is not None]
        if not active:
            return
        scale = 1.0
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((self.params[i].grad ** 2).sum()) for i in active))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i in active:
            p = self.params[i]
            g = p.grad * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
