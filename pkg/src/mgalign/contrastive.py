"""Masked global alignment: contrastive pretraining with missing modalities.

For anchor modality ``i`` of patient ``k`` the positive target is the
complementary centroid ``c[i,k]`` (normalized sum of the patient's other
present modalities). Negatives are the targets ``v[i,m]`` of every other
patient in the batch, falling back to the global centroid ``zbar[m]`` when
``m`` has nothing besides modality ``i``. Only patients with modality ``i``
present and at least two modalities overall serve as anchors.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoders import EncoderBank, StayMatrix
from .nn import Adam, Tensor, matmul, no_grad, parameter, where
from .nn import functional as F

log = logging.getLogger(__name__)


class EmptyComplement(ValueError):
    """No other modality is present; the caller must use the global fallback."""


class SkippedBatch(RuntimeError):
    """The batch has no valid anchor with at least one negative."""


def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(np.linalg.norm(v), F.L2_EPS)


def complementary_centroid(z: np.ndarray, i: int, mask: np.ndarray) -> np.ndarray:
    """Normalized masked sum over modalities other than ``i`` for one patient."""
    mask = np.asarray(mask, dtype=bool)
    others = mask.copy()
    others[i] = False
    if not others.any():
        raise EmptyComplement(f"patient has no modality besides {i}")
    return _unit(z[others].sum(axis=0))


def global_representation(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("global_representation: patient has no present modality")
    return _unit(z[mask].sum(axis=0))


def negative_target(z: np.ndarray, mask: np.ndarray, i: int) -> np.ndarray:
    """Target of patient ``m`` (embeddings ``z``) when serving as a negative for modality ``i``."""
    try:
        return complementary_centroid(z, i, mask)
    except EmptyComplement:
        return global_representation(z, mask)


@dataclass
class CentroidSet:
    complementary: np.ndarray  # (N, M, D), rows undefined where has_complement is False
    has_complement: np.ndarray  # (N, M)
    global_: np.ndarray  # (N, D)
    anchors: np.ndarray  # (N, M): valid anchor sets B_i as columns


def centroid_set(Z: np.ndarray, mask: np.ndarray) -> CentroidSet:
    mask = np.asarray(mask, dtype=bool)
    Mf = mask[..., None].astype(np.float64)
    S = (Z * Mf).sum(axis=1)
    comp = S[:, None, :] - Z * Mf
    C = mask.sum(axis=1)
    has = (C[:, None] - mask) > 0
    norm = np.maximum(np.linalg.norm(comp, axis=-1, keepdims=True), F.L2_EPS)
    gnorm = np.maximum(np.linalg.norm(S, axis=-1, keepdims=True), F.L2_EPS)
    return CentroidSet(comp / norm, has, S / gnorm, mask & (C[:, None] >= 2))


class Temperature:
    """Learnable temperature ``tau = exp(log_tau)``, projected into bounds after each step."""

    def __init__(self, init: float = 0.07, bounds: tuple[float, float] = (1e-3, 5.0)):
        self.bounds = bounds
        self.log_tau = parameter(math.log(init))

    @property
    def tau(self) -> Tensor:
        return self.log_tau.exp()

    @property
    def value(self) -> float:
        return float(math.exp(self.log_tau.data))

    def project(self) -> None:
        lo, hi = self.bounds
        self.log_tau.data = np.clip(self.log_tau.data, math.log(lo), math.log(hi))


def masked_infonce(Z: Tensor, mask: np.ndarray, tau) -> tuple[Tensor, dict[int, Tensor]]:
    """Masked InfoNCE over a batch of (N, M, D) unit embeddings.

    ``tau`` may be a float or a Tensor (for a learnable temperature). Returns
    the total loss (mean over modalities with a nonempty anchor set) and the
    per-modality losses keyed by modality index. Raises :class:`SkippedBatch`
    when no anchor has a negative.
    """
    mask = np.asarray(mask, dtype=bool)
    N, M, _ = Z.shape
    C = mask.sum(axis=1)
    valid = C >= 1
    anchors = mask & (C[:, None] >= 2) & valid[:, None]
    if valid.sum() < 2 or not anchors.any():
        raise SkippedBatch("no anchor with both a positive and a negative in this batch")

    Mf = mask[..., None].astype(np.float64)
    S = (Z * Mf).sum(axis=1)
    comp = F.l2_normalize(S.reshape(N, 1, -1) - Z * Mf)
    zbar = F.l2_normalize(S)
    has = (C[:, None] - mask) > 0
    V = where(has[..., None], comp, zbar.reshape(N, 1, -1) * np.ones((1, M, 1)))

    # logits[i, k, m] = z[k, i] . v[m, i] / tau
    sims = matmul(Z.transpose(1, 0, 2), V.transpose(1, 2, 0))
    inv_tau = 1.0 / (tau if isinstance(tau, Tensor) else Tensor(float(tau)))
    logits = sims * inv_tau
    lse = F.logsumexp(logits, mask=valid[None, None, :])  # (M, N)
    pos = (Z * V).sum(axis=-1).transpose(1, 0) * inv_tau  # (M, N)
    terms = lse - pos

    per_modality: dict[int, Tensor] = {}
    for i in range(M):
        rows = np.flatnonzero(anchors[:, i])
        if rows.size:
            per_modality[i] = terms[i][rows].mean()
    total = per_modality[next(iter(per_modality))]
    for i in list(per_modality)[1:]:
        total = total + per_modality[i]
    return total * (1.0 / len(per_modality)), per_modality


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.005
    drop_p: float = 0.15
    patience: int = 10
    tau_init: float = 0.07
    tau_bounds: tuple[float, float] = (1e-3, 5.0)
    seed: int = 0


@dataclass
class PretrainResult:
    temperature: Temperature
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None, min_last: int = 2):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= min_last:
            yield idx


def evaluate_loss(bank: EncoderBank, data: StayMatrix, tau: float, batch_size: int = 128) -> tuple[float, dict]:
    """Mean batch loss in eval mode (no dropout of either kind)."""
    losses, per = [], {}
    with no_grad():
        for idx in iter_batches(len(data), batch_size, None):
            Z, mask, _ = bank.embed(data.take(idx))
            try:
                loss, parts = masked_infonce(Z, mask, tau)
            except SkippedBatch:
                continue
            losses.append(loss.item())
            for i, v in parts.items():
                per.setdefault(bank.names[i], []).append(v.item())
    if not losses:
        raise SkippedBatch("no evaluable batch")
    return float(np.mean(losses)), {m: float(np.mean(v)) for m, v in per.items()}


def pretrain(bank: EncoderBank, train: StayMatrix, val: StayMatrix,
             config: PretrainConfig = PretrainConfig(), log_path=None) -> PretrainResult:
    """Adam on the masked InfoNCE loss with early stopping on validation loss.

    The bank is left holding its best-validation weights.
    """
    bank.unfreeze()
    temp = Temperature(config.tau_init, config.tau_bounds)
    opt = Adam(bank.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    opt_tau = Adam([temp.log_tau], lr=config.lr)
    rng = np.random.default_rng([config.seed, 4242])
    result = PretrainResult(temp)
    best_state = (copy.deepcopy(bank.state_dict()), temp.log_tau.data.copy())
    stale = 0
    for epoch in range(1, config.epochs + 1):
        batch_losses = []
        for idx in iter_batches(len(train), config.batch_size, rng):
            Z, mask, _ = bank.embed(train.take(idx), config.drop_p, train=True, rng=rng)
            try:
                loss, _ = masked_infonce(Z, mask, temp.tau)
            except SkippedBatch:
                continue
            opt.zero_grad()
            opt_tau.zero_grad()
            loss.backward()
            opt.step()
            opt_tau.step()
            temp.project()
            batch_losses.append(loss.item())
        val_loss, val_parts = evaluate_loss(bank, val, temp.value, config.batch_size)
        row = {"epoch": epoch, "train_loss": float(np.mean(batch_losses)) if batch_losses else math.nan,
               "val_loss": val_loss, "tau": temp.value}
        row.update({f"loss_{m}": val_parts.get(m, math.nan) for m in bank.names})
        result.history.append(row)
        log.info("pretrain epoch %d train %.4f val %.4f tau %.4f", epoch, row["train_loss"], val_loss, temp.value)
        if val_loss < result.best_val:
            result.best_val, result.best_epoch = val_loss, epoch
            best_state = (copy.deepcopy(bank.state_dict()), temp.log_tau.data.copy())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    bank.load_state_dict(best_state[0])
    temp.log_tau.data = best_state[1]
    if log_path is not None:
        write_training_log(log_path, result.history, bank.names)
    return result


def write_training_log(path, history: Sequence[dict], modalities: Sequence[str]) -> None:
    cols = ["epoch", "train_loss", "val_loss", "tau"] + [f"loss_{m}" for m in modalities]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])


def pretrain_sweep(make_bank, train: StayMatrix, val: StayMatrix, base: PretrainConfig,
                   lrs=(1e-3, 1e-4, 1e-5, 1e-6), weight_decays=(0.005, 0.01, 0.05)):
    """Grid over learning rate and weight decay; returns the best (bank, result, config)."""
    best = None
    for lr in lrs:
        for wd in weight_decays:
            cfg = dataclasses.replace(base, lr=lr, weight_decay=wd)
            bank = make_bank()
            res = pretrain(bank, train, val, cfg)
            if best is None or res.best_val < best[1].best_val:
                best = (bank, res, cfg)
    return best
