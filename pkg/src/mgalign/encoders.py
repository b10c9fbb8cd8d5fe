"""Per-modality encoders into a shared unit-sphere latent space.

Present modalities are encoded; absent (or dropped) ones are replaced by a
learnable per-modality token, and every vector is then L2-normalized::

    h = M * Encoder(x) + (1 - M) * t,    z = h / ||h||
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import LayerNorm, Linear, Module, ShapeError, Tensor, no_grad, parameter, scatter_rows, stack, where
from .nn import functional as F
from .synth import ModalityRecord, ModalitySpec, group_by_stay, sign_log_scale


class Source(str, enum.Enum):
    ENCODED = "ENCODED"
    MISSING_TOKEN = "MISSING_TOKEN"
    DROPPED = "DROPPED"


@dataclass
class LatentEmbedding:
    stay_id: str
    modality: str
    vector: np.ndarray
    source: Source


@dataclass
class PresenceMask:
    """Indicator ``M[k, i]`` for patient k, modality i, and counts ``C[k]``."""

    M: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return self.M.sum(axis=1)


@dataclass
class StayMatrix:
    """Stay-level inputs: one aggregated feature vector per (stay, modality)."""

    stay_ids: list[str]
    features: dict[str, np.ndarray]
    present: np.ndarray
    modalities: list[str]

    def __len__(self) -> int:
        return len(self.stay_ids)

    def take(self, idx) -> "StayMatrix":
        idx = np.asarray(idx)
        return StayMatrix([self.stay_ids[i] for i in idx], {m: x[idx] for m, x in self.features.items()},
                          self.present[idx], self.modalities)


def stay_matrix(records: Sequence[ModalityRecord], specs: Sequence[ModalitySpec],
                stay_ids: Sequence[str] | None = None) -> StayMatrix:
    """Collapse each stay's events of a modality into their mean feature vector."""
    grouped = group_by_stay(records)
    if stay_ids is None:
        stay_ids = list(grouped)
    names = [s.name for s in specs]
    col = {m: i for i, m in enumerate(names)}
    feats = {s.name: np.zeros((len(stay_ids), s.dim)) for s in specs}
    counts = np.zeros((len(stay_ids), len(specs)))
    for row, stay in enumerate(stay_ids):
        for r in grouped.get(stay, ()):
            if r.absent:
                continue
            feats[r.modality][row] += r.features
            counts[row, col[r.modality]] += 1
    present = counts > 0
    for m, i in col.items():
        nz = present[:, i]
        feats[m][nz] /= counts[nz, i][:, None]
    return StayMatrix(list(stay_ids), feats, present, names)


class ModalityEncoder(Module):
    """Linear -> LayerNorm -> ReLU -> Dropout -> Linear -> LayerNorm."""

    def __init__(self, n_in: int, hidden: int, latent_dim: int, dropout: float, rng: np.random.Generator):
        self.fc1 = Linear(n_in, hidden, rng)
        self.ln1 = LayerNorm(hidden)
        self.fc2 = Linear(hidden, latent_dim, rng)
        self.ln2 = LayerNorm(latent_dim)
        self.dropout = dropout
        self.n_in = n_in

    def __call__(self, x, rng: np.random.Generator | None = None) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"encoder expects {self.n_in} features, got {x.shape[-1]}")
        h = self.ln1(self.fc1(x)).relu()
        h = F.dropout(h, self.dropout, rng, self.training)
        return self.ln2(self.fc2(h))


class EncoderBank(Module):
    def __init__(self, specs: Sequence[ModalitySpec], latent_dim: int = 256, hidden: int = 512,
                 dropout: float = 0.3, scale_inputs: bool = True, seed: int = 0):
        rng = np.random.default_rng([seed, 2027])
        self.specs = list(specs)
        self.names = [s.name for s in specs]
        self.latent_dim = latent_dim
        self.scale_inputs = scale_inputs
        self.encoders = {s.name: ModalityEncoder(s.dim, hidden, latent_dim, dropout, rng) for s in specs}
        self.tokens = {s.name: parameter(rng.normal(0.0, 0.02, size=latent_dim)) for s in specs}
        self.frozen = False

    def index(self, modality: str) -> int:
        return self.names.index(modality)

    # -- freezing ---------------------------------------------------------
    def freeze(self) -> "EncoderBank":
        for p in self.parameters():
            p.requires_grad = False
        self.frozen = True
        return self

    def unfreeze(self) -> "EncoderBank":
        for p in self.parameters():
            p.requires_grad = True
        self.frozen = False
        return self

    # -- encoding ---------------------------------------------------------
    def _prepare(self, x: np.ndarray) -> np.ndarray:
        return sign_log_scale(x) if self.scale_inputs else x

    def encode(self, modality: str, x: np.ndarray, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """Unit-norm embeddings of raw feature rows of one modality."""
        enc = self.encoders[modality]
        enc.train(train)
        try:
            return F.l2_normalize(enc(self._prepare(np.asarray(x, dtype=np.float64)), rng))
        finally:
            enc.train(False)

    def token(self, modality: str) -> Tensor:
        return F.l2_normalize(self.tokens[modality])

    def embed(self, batch: StayMatrix, drop_p: float = 0.0, train: bool = False,
              rng: np.random.Generator | None = None):
        """Route every (stay, modality) through its encoder or missing token.

        Returns ``(Z, mask, sources)``: Z is a (N, M, D) Tensor of unit
        vectors, ``mask`` the post-dropout presence indicator and
        ``sources`` a (N, M) array of :class:`Source` value strings.
        """
        if not 0.0 <= drop_p < 1.0:
            raise ValueError(f"drop_p must lie in [0, 1), got {drop_p}")
        present = batch.present.astype(bool)
        mask = present.copy()
        if train and drop_p > 0.0:
            mask &= rng.random(present.shape) >= drop_p
        sources = np.full(present.shape, Source.MISSING_TOKEN.value, dtype="<U13")
        sources[present & ~mask] = Source.DROPPED.value
        sources[mask] = Source.ENCODED.value
        N = len(batch)
        self.train(train)
        columns = []
        for i, name in enumerate(self.names):
            x = batch.features[name]
            if x.shape[1] != self.specs[i].dim:
                raise ShapeError(f"{name}: features have dim {x.shape[1]}, encoder expects {self.specs[i].dim}")
            rows = np.flatnonzero(mask[:, i])
            tok = self.tokens[name]
            if rows.size == 0:
                h = tok.reshape(1, -1) * np.ones((N, 1))
            else:
                enc = self.encoders[name](self._prepare(x[rows]), rng)
                h = where(mask[:, i][:, None], scatter_rows(enc, rows, N), tok.reshape(1, -1) * np.ones((N, 1)))
            columns.append(F.l2_normalize(h))
        self.train(False)
        return stack(columns, axis=1), mask, sources

    def encode_batch(self, batch: StayMatrix, drop_p: float = 0.0, train: bool = False,
                     seed: int | None = None) -> list[LatentEmbedding]:
        rng = np.random.default_rng(seed)
        with no_grad():
            Z, _, sources = self.embed(batch, drop_p, train, rng)
        out = []
        for k, stay in enumerate(batch.stay_ids):
            for i, name in enumerate(self.names):
                out.append(LatentEmbedding(stay, name, Z.data[k, i].copy(), Source(sources[k, i])))
        return out


def write_embeddings_csv(path, embeddings: Sequence[LatentEmbedding]) -> None:
    D = len(embeddings[0].vector) if embeddings else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stay_id", "modality", "source"] + [f"v_{j}" for j in range(D)])
        for e in embeddings:
            w.writerow([e.stay_id, e.modality, e.source.value] + [repr(float(v)) for v in e.vector])


def read_embeddings_csv(path) -> list[LatentEmbedding]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            out.append(LatentEmbedding(row[0], row[1], np.array([float(v) for v in row[3:]]), Source(row[2])))
    return out
