"""Causal transformer over projected event timelines.

Each event embedding (a unit vector from the encoder bank) and the shared
PREDICT embedding are concatenated with a scalar time feature, projected to
the decoder width, summed with a sinusoidal position code and decoded
causally. The task head reads the hidden state at every PREDICT position,
so a stay with ``n`` events yields ``n`` belief updates.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoders import EncoderBank
from .nn import LayerNorm, Linear, Module, Tensor, concat, no_grad, parameter, scatter_rows
from .nn import Adam
from .nn import functional as F
from .timeline import EventTimeline, ablate_modality

log = logging.getLogger(__name__)

TASKS = ("mortality", "phenotyping", "los")
N_PHENOTYPES = 25
LOS_RANGE = (12.0, 720.0)
PHENO_WEIGHT_CAP = 100.0


class SequenceTooLong(ValueError):
    pass


class DegenerateLabels(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss; ``state`` holds the last finite weights."""

    def __init__(self, message: str, state: dict | None = None, epoch: int = 0):
        super().__init__(message)
        self.state = state
        self.epoch = epoch


@dataclass
class DecoderConfig:
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.1
    task: str = "mortality"
    max_len: int = 128
    all_attention: bool = False

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.max_len < 2 or self.max_len % 2:
            raise ValueError("max_len must be an even number >= 2")

    @property
    def n_outputs(self) -> int:
        return N_PHENOTYPES if self.task == "phenotyping" else 1


@dataclass
class TrajectoryOutput:
    """Per-slot raw outputs (logits, or log-hours for ``los``)."""

    stay_id: str
    task: str
    per_slot_logits: np.ndarray  # (n_slots, n_outputs)
    offsets: np.ndarray

    @property
    def final_prediction(self) -> np.ndarray:
        return self.per_slot_logits[-1]

    def predictions(self) -> np.ndarray:
        """Probabilities for classification, hours for length of stay."""
        if self.task == "los":
            return np.expm1(self.per_slot_logits)
        return 1.0 / (1.0 + np.exp(-self.per_slot_logits))


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def time_feature(offset_minutes) -> np.ndarray:
    """Offset in days, the scalar appended to every sequence element."""
    return np.asarray(offset_minutes, dtype=np.float64) / 1440.0


class Block(Module):
    def __init__(self, d: int, heads: int, ffn_mult: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, ffn_mult * d, rng)
        self.fc2 = Linear(ffn_mult * d, d, rng)
        self.heads = heads

    def __call__(self, x: Tensor, dropout: float, rng, train: bool):
        h = self.ln1(x)
        a, weights = F.causal_self_attention(h, self.q.W, self.k.W, self.v.W, self.o.W, self.heads,
                                             self.q.b, self.k.b, self.v.b, self.o.b)
        x = x + F.dropout(a, dropout, rng, train)
        f = self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x + F.dropout(f, dropout, rng, train), weights


@dataclass
class _Packed:
    """A padded batch: flat row positions of events and PREDICT slots."""

    B: int
    T: int
    event_rows: np.ndarray
    slot_rows: np.ndarray
    slot_owner: np.ndarray  # timeline index of every slot row
    offsets: np.ndarray  # (B*T,) time feature


class SeqDecoder(Module):
    def __init__(self, config: DecoderConfig, bank: EncoderBank, seed: int = 0):
        config.validate()
        rng = np.random.default_rng([seed, 5151])
        self.config = config
        self.bank = bank
        D = bank.latent_dim
        self.predict_token = parameter(rng.normal(0.0, 0.02, size=D))
        self.proj = Linear(D + 1, config.d_model, rng)
        self.blocks = [Block(config.d_model, config.heads, config.ffn_mult, rng) for _ in range(config.layers)]
        self.ln_f = LayerNorm(config.d_model)
        self.head = Linear(config.d_model, config.n_outputs, rng)

    def decoder_parameters(self) -> list[Tensor]:
        return [p for name, p in self.named_parameters() if not name.startswith("bank.")]

    # -- embedding --------------------------------------------------------
    def event_embeddings(self, timelines: Sequence[EventTimeline], train: bool = False,
                         rng: np.random.Generator | None = None, cache: dict | None = None) -> Tensor:
        """(total_events, D) embeddings of all events, in timeline order."""
        flat = [e for t in timelines for e in t.events]
        if cache is not None and (self.bank.frozen or not train):
            return Tensor(np.stack([cache[e.record_id] for e in flat]))
        by_mod: dict[str, list[int]] = {}
        for i, e in enumerate(flat):
            by_mod.setdefault(e.modality, []).append(i)
        out = None
        for m in self.bank.names:
            rows = by_mod.get(m)
            if not rows:
                continue
            X = np.stack([flat[i].features for i in rows])
            part = scatter_rows(self.bank.encode(m, X, train=train and not self.bank.frozen, rng=rng),
                                np.asarray(rows), len(flat))
            out = part if out is None else out + part
        return out

    def _pack(self, timelines: Sequence[EventTimeline], pad_to: int | None) -> _Packed:
        lengths = [len(t) for t in timelines]
        if max(lengths) > self.config.max_len:
            raise SequenceTooLong(f"sequence of {max(lengths)} positions exceeds max_len={self.config.max_len}")
        if min(lengths) == 0:
            raise ValueError("empty timeline")
        T = pad_to if pad_to is not None else max(lengths)
        ev, sl, owner = [], [], []
        offsets = np.zeros(len(timelines) * T)
        for b, t in enumerate(timelines):
            for j, e in enumerate(t.events):
                ev.append(b * T + 2 * j)
                sl.append(b * T + 2 * j + 1)
                owner.append(b)
                offsets[b * T + 2 * j] = offsets[b * T + 2 * j + 1] = time_feature(e.offset_minutes)
        return _Packed(len(timelines), T, np.asarray(ev), np.asarray(sl), np.asarray(owner), offsets)

    # -- forward ----------------------------------------------------------
    def forward_batch(self, timelines: Sequence[EventTimeline], train: bool = False,
                      rng: np.random.Generator | None = None, cache: dict | None = None,
                      pad_to: int | None = None):
        """Run a padded batch. Returns (slot outputs Tensor, packing, attention per layer)."""
        cfg = self.config
        pk = self._pack(timelines, pad_to)
        n_rows = pk.B * pk.T
        E = self.event_embeddings(timelines, train, rng, cache)
        X = scatter_rows(E, pk.event_rows, n_rows)
        is_slot = np.zeros((n_rows, 1))
        is_slot[pk.slot_rows] = 1.0
        X = X + self.predict_token.reshape(1, -1) * is_slot
        X = concat([X, Tensor(pk.offsets[:, None])], axis=-1)
        h = self.proj(X).reshape(pk.B, pk.T, cfg.d_model) + sinusoidal_positions(pk.T, cfg.d_model)
        h = F.dropout(h, cfg.dropout, rng, train)
        attention = []
        for li, block in enumerate(self.blocks):
            h, w = block(h, cfg.dropout, rng, train)
            if cfg.all_attention or li == len(self.blocks) - 1:
                attention.append(w)
        h = self.ln_f(h).reshape(n_rows, cfg.d_model)
        # the head sees every row so that its matmul shape never depends on the slot count
        out = self.head(h)[pk.slot_rows]
        return out, pk, attention

    def forward(self, timeline: EventTimeline):
        """Inference on one stay, padded to ``max_len`` so that results never
        depend on how many positions follow a slot.

        Returns ``(TrajectoryOutput, attention)`` where ``attention`` lists
        (heads, T, T) weight arrays cropped to the real sequence length, the
        final layer last.
        """
        with no_grad():
            # one event per encoder call, for the same reason
            cache = {e.record_id: self.bank.encode(e.modality, e.features[None, :]).data[0] for e in timeline.events}
            out, pk, attn = self.forward_batch([timeline], cache=cache, pad_to=self.config.max_len)
        T = len(timeline)
        traj = TrajectoryOutput(timeline.stay_id, self.config.task, out.data.copy(),
                                np.array([e.offset_minutes for e in timeline.events]))
        return traj, [w.data[0, :, :T, :T].copy() for w in attn]

    def predict(self, timelines: Sequence[EventTimeline], batch_size: int = 64,
                cache: dict | None = None) -> list[TrajectoryOutput]:
        outs = []
        with no_grad():
            for start in range(0, len(timelines), batch_size):
                chunk = timelines[start:start + batch_size]
                y, pk, _ = self.forward_batch(chunk, cache=cache)
                for b, t in enumerate(chunk):
                    outs.append(TrajectoryOutput(t.stay_id, self.config.task, y.data[pk.slot_owner == b].copy(),
                                                 np.array([e.offset_minutes for e in t.events])))
        return outs


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mortality_pos_weight(labels: Sequence[int]) -> float:
    labels = np.asarray(labels)
    pos = int(labels.sum())
    if pos == 0:
        raise DegenerateLabels("training split has no positive mortality label")
    return (len(labels) - pos) / pos


def phenotype_pos_weights(labels: np.ndarray, cap: float = PHENO_WEIGHT_CAP) -> np.ndarray:
    labels = np.asarray(labels)
    pos = labels.sum(axis=0).astype(np.float64)
    neg = len(labels) - pos
    with np.errstate(divide="ignore"):
        w = np.where(pos > 0, neg / np.maximum(pos, 1), cap)
    never = np.flatnonzero(pos == 0)
    if never.size:
        log.warning("phenotype classes %s never positive in training; weight capped at %g", never.tolist(), cap)
    return np.minimum(w, cap)


def loss_mortality(slot_logits: Tensor, label: int, pos_weight: float = 1.0) -> Tensor:
    if label not in (0, 1):
        raise ValueError("mortality label must be 0 or 1")
    z = slot_logits.reshape(-1)
    return F.bce_with_logits(z, np.full(z.shape, float(label)), pos_weight).mean()


def loss_phenotyping(slot_logits: Tensor, labels: np.ndarray, pos_weights) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("phenotype labels must be 0/1")
    n_slots = slot_logits.shape[0]
    y = np.broadcast_to(labels, (n_slots, labels.shape[-1]))
    return F.bce_with_logits(slot_logits, y, pos_weights).sum(axis=1).mean()


def los_target(los_hours: float) -> float:
    if not LOS_RANGE[0] <= los_hours <= LOS_RANGE[1]:
        raise ValueError(f"length of stay {los_hours} h outside [{LOS_RANGE[0]}, {LOS_RANGE[1]}]")
    return math.log1p(los_hours)


def loss_los(slot_outputs: Tensor, los_hours: float) -> Tensor:
    diff = slot_outputs.reshape(-1) - los_target(los_hours)
    return (diff * diff).mean()


@dataclass
class TaskWeights:
    mortality: float = 1.0
    phenotypes: np.ndarray | None = None

    @classmethod
    def from_timelines(cls, task: str, timelines: Sequence[EventTimeline]) -> "TaskWeights":
        if task == "mortality":
            return cls(mortality=mortality_pos_weight([t.labels.mortality for t in timelines]))
        if task == "phenotyping":
            return cls(phenotypes=phenotype_pos_weights(np.stack([t.labels.phenotypes for t in timelines])))
        return cls()


def batch_loss(task: str, out: Tensor, pk: _Packed, timelines: Sequence[EventTimeline],
               weights: TaskWeights) -> Tensor:
    """Mean over stays of each stay's slot-averaged task loss."""
    total = None
    for b, t in enumerate(timelines):
        rows = np.flatnonzero(pk.slot_owner == b)
        y = out[rows]
        if task == "mortality":
            term = loss_mortality(y, t.labels.mortality, weights.mortality)
        elif task == "phenotyping":
            term = loss_phenotyping(y, t.labels.phenotypes, weights.phenotypes)
        else:
            term = loss_los(y, t.labels.los_hours)
        total = term if total is None else total + term
    return total * (1.0 / len(timelines))


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    drop_p: float = 0.20
    patience: int = 5
    clip_norm: float | None = 1.0
    seed: int = 0


@dataclass
class FinetuneResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    weights: TaskWeights = field(default_factory=TaskWeights)


def modality_dropout(timeline: EventTimeline, p: float, rng: np.random.Generator) -> EventTimeline:
    """With probability ``p`` remove one randomly chosen modality (if two or more are present)."""
    mods = timeline.modalities
    if p <= 0.0 or len(mods) < 2 or rng.random() >= p:
        return timeline
    return ablate_modality(timeline, mods[int(rng.integers(len(mods)))])


def embedding_cache(bank: EncoderBank, timelines: Sequence[EventTimeline]) -> dict[int, np.ndarray]:
    """record_id -> embedding for every event, valid while the bank stays frozen."""
    by_mod: dict[str, list] = {}
    for t in timelines:
        for e in t.events:
            by_mod.setdefault(e.modality, []).append(e)
    cache = {}
    with no_grad():
        for m, events in by_mod.items():
            Z = bank.encode(m, np.stack([e.features for e in events])).data
            for e, z in zip(events, Z):
                cache[e.record_id] = z
    return cache


def evaluate_decoder_loss(model: SeqDecoder, timelines: Sequence[EventTimeline], weights: TaskWeights,
                          batch_size: int = 64, cache: dict | None = None) -> float:
    total, n = 0.0, 0
    with no_grad():
        for start in range(0, len(timelines), batch_size):
            chunk = timelines[start:start + batch_size]
            out, pk, _ = model.forward_batch(chunk, cache=cache)
            total += batch_loss(model.config.task, out, pk, chunk, weights).item() * len(chunk)
            n += len(chunk)
    return total / n


def finetune(model: SeqDecoder, train: Sequence[EventTimeline], val: Sequence[EventTimeline],
             config: FinetuneConfig = FinetuneConfig(), log_path=None) -> FinetuneResult:
    """Adam with early stopping on validation loss; leaves the best weights loaded.

    A frozen bank contributes no trainable parameters. Modality dropout is
    applied to training timelines only.
    """
    task = model.config.task
    weights = TaskWeights.from_timelines(task, train)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay, clip_norm=config.clip_norm)
    rng = np.random.default_rng([config.seed, 777])
    cache = embedding_cache(model.bank, list(train) + list(val)) if model.bank.frozen else None
    result = FinetuneResult(weights=weights)
    best_state = copy.deepcopy(model.state_dict())
    last_finite = best_state
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = [modality_dropout(train[i], config.drop_p, rng) for i in order[start:start + config.batch_size]]
            out, pk, _ = model.forward_batch(chunk, train=True, rng=rng, cache=cache)
            loss = batch_loss(task, out, pk, chunk, weights)
            if not np.isfinite(loss.data):
                model.load_state_dict(last_finite)
                raise DivergenceError(f"non-finite loss at epoch {epoch}", last_finite, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        last_finite = copy.deepcopy(model.state_dict())
        val_loss = evaluate_decoder_loss(model, val, weights, cache=cache)
        result.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss})
        log.info("finetune epoch %d train %.4f val %.4f", epoch, np.mean(losses), val_loss)
        if val_loss < result.best_val:
            result.best_val, result.best_epoch = val_loss, epoch
            best_state = last_finite
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for row in result.history:
                w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])
    return result


def write_trajectories_csv(path, outputs: Sequence[TrajectoryOutput]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        multi = bool(outputs) and outputs[0].per_slot_logits.shape[1] > 1
        w.writerow(["stay_id", "slot_index", "offset_minutes", "prediction"] + (["class_id"] if multi else []))
        for o in outputs:
            preds = o.predictions()
            for j, off in enumerate(o.offsets):
                if multi:
                    for c, v in enumerate(preds[j]):
                        w.writerow([o.stay_id, j, repr(float(off)), repr(float(v)), c])
                else:
                    w.writerow([o.stay_id, j, repr(float(off)), repr(float(preds[j, 0]))])
