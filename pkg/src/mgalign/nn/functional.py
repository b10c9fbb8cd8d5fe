"""Fused differentiable primitives built on :mod:`mgalign.nn.tensor`.

The fused ops (layer norm, masked softmax, L2 normalization, logsumexp,
BCE-with-logits) carry hand-derived backward passes; each is covered by a
finite-difference check in the test suite.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, _sigmoid, as_tensor, matmul

LAYER_NORM_EPS = 1e-5
L2_EPS = 1e-12


def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W + b`` over the last axis."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2:
        raise ShapeError(f"dense: weight must be 2-D, got shape {W.shape}")
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: input has {x.shape[-1]} features but weight expects "
                         f"{W.shape[0]} (x {x.shape}, W {W.shape})")
    out = matmul(x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"dense: bias shape {b.shape} does not match output width {W.shape[1]}")
        out = out + b
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: feature dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    value = xhat * gamma.data + beta.data

    def bw(g):
        out._send(beta, g.reshape(-1, d).sum(axis=0))
        out._send(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        gx = g * gamma.data
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        out._send(x, gx)
    out = Tensor._make(value, (x, gamma, beta), "layer_norm", bw)
    return out


def l2_normalize(x: Tensor, eps: float = L2_EPS) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom

    def bw(g):
        # below eps the map is a plain scaling by 1/eps
        dot = (g * y).sum(axis=-1, keepdims=True)
        gx = np.where(norm > eps, (g - y * dot) / denom, g / denom)
        out._send(x, gx)
    out = Tensor._make(y, (x,), "l2_normalize", bw)
    return out


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    c = math.sqrt(2.0 / math.pi)
    u = c * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    value = 0.5 * x.data * (1.0 + t)

    def bw(g):
        du = c * (1.0 + 3 * 0.044715 * x.data ** 2)
        out._send(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du))
    out = Tensor._make(value, (x,), "gelu", bw)
    return out


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) during training."""
    if not train or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    keep = rng.random(x.shape) >= p
    return x * (keep / (1.0 - p))


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0.

    Row sums use a sequential cumulative sum so that appending masked
    columns never changes the bits of the result.
    """
    scores = as_tensor(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no admissible entries")
    masked = np.where(mask, scores.data, -np.inf)
    peak = masked.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(masked - peak), 0.0)
    total = np.cumsum(e, axis=-1)[..., -1:]
    p = e / total

    def bw(g):
        dot = np.cumsum(g * p, axis=-1)[..., -1:]
        out._send(scores, p * (g - dot))
    out = Tensor._make(p, (scores,), "masked_softmax", bw)
    return out


def softmax(scores: Tensor) -> Tensor:
    scores = as_tensor(scores)
    return masked_softmax(scores, np.ones(scores.shape, dtype=bool))


def causal_mask(T: int) -> np.ndarray:
    """Boolean (T, T) mask, True where key index <= query index."""
    return np.tril(np.ones((T, T), dtype=bool))


def logsumexp(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """log-sum-exp over the last axis, optionally over masked entries only."""
    x = as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    masked = np.where(mask, x.data, -np.inf)
    peak = masked.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(masked - peak), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    value = (np.log(total) + peak)[..., 0]

    def bw(g):
        out._send(x, g[..., None] * e / total)
    out = Tensor._make(value, (x,), "logsumexp", bw)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    value = -np.logaddexp(0.0, -x.data)

    def bw(g):
        out._send(x, g * _sigmoid(-x.data))
    out = Tensor._make(value, (x,), "log_sigmoid", bw)
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray, pos_weight=1.0) -> Tensor:
    """Elementwise weighted binary cross-entropy on logits.

    ``loss = -(w * y * log s(x) + (1 - y) * log(1 - s(x)))``, matching the
    usual positive-weight convention.
    """
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    w = np.asarray(pos_weight, dtype=np.float64)
    x = logits.data
    log_p = -np.logaddexp(0.0, -x)
    log_q = -np.logaddexp(0.0, x)
    value = -(w * y * log_p + (1.0 - y) * log_q)

    def bw(g):
        s = _sigmoid(x)
        out._send(logits, g * (-(w * y) * (1.0 - s) + (1.0 - y) * s))
    out = Tensor._make(value, (logits,), "bce_with_logits", bw)
    return out


def causal_self_attention(x: Tensor, Wq: Tensor, Wk: Tensor, Wv: Tensor, Wo: Tensor,
                          heads: int, bq=None, bk=None, bv=None, bo=None):
    """Multi-head causal self-attention.

    ``x`` has shape (T, d) or (B, T, d). Returns the output with the same
    shape as ``x`` and the attention weights with shape (heads, T, T) or
    (B, heads, T, T).
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ValueError(f"causal_self_attention: width {d} is not divisible by {heads} heads")
    if x.shape[-2] < 1:
        raise ValueError("causal_self_attention: empty sequence")
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    B, T, _ = x.shape
    dh = d // heads

    def split(t):
        return t.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    q = split(dense(x, Wq, bq))
    k = split(dense(x, Wk, bk))
    v = split(dense(x, Wv, bv))
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    weights = masked_softmax(scores, causal_mask(T))
    ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, T, d)
    out = dense(ctx, Wo, bo)
    if single:
        return out.reshape(T, d), weights.reshape(heads, T, T)
    return out, weights
