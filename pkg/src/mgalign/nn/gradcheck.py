from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    """The checked function produced NaN or Inf."""


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Compare reverse-mode gradients against central differences.

    ``f`` is a zero-argument closure returning a scalar Tensor built from
    ``params``. Returns ``max |analytic - numeric| / max(1, |numeric|)`` over
    every coordinate of every parameter.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-6, 1e-3]")
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("f is not finite at the base point")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = float(f().data)
            flat[j] = orig - h
            down = float(f().data)
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError(f"f is not finite at parameter {pi} ({p.name}), coordinate {j}")
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic[pi].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
