"""
Reverse-mode autodiff on a toy attention layer
==============================================

Build a small causal self-attention block, take a scalar loss through it and
compare the backpropagated gradients with central finite differences.
"""

import numpy as np

from mgalign.nn import grad_check, parameter
from mgalign.nn import functional as F

rng = np.random.default_rng(0)

# five positions of width 4, two heads
x = parameter(rng.normal(size=(5, 4)))
Wq, Wk, Wv, Wo = (parameter(0.5 * rng.normal(size=(4, 4))) for _ in range(4))

out, weights = F.causal_self_attention(x, Wq, Wk, Wv, Wo, heads=2)
print("attention of head 0 (rows sum to one, nothing above the diagonal):")
print(np.round(weights.data[0], 3))

# a scalar objective so every weight receives a gradient
target = rng.normal(size=(5, 4))
loss = lambda: ((F.causal_self_attention(x, Wq, Wk, Wv, Wo, heads=2)[0] - target) ** 2).mean()

err = grad_check(loss, [x, Wq, Wk, Wv, Wo])
print(f"max relative gradient error vs finite differences: {err:.2e}")
