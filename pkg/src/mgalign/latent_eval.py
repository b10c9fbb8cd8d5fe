"""Geometry diagnostics for the shared latent space."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoders import LatentEmbedding, Source


class UndefinedMetric(ValueError):
    pass


def _index(embeddings: Sequence[LatentEmbedding], modality: str, include_missing: bool) -> dict[str, np.ndarray]:
    out = {}
    for e in embeddings:
        if e.modality != modality:
            continue
        if e.source != Source.ENCODED and not include_missing:
            continue
        out[e.stay_id] = e.vector
    return out


@dataclass
class Retrieval:
    query_mod: str
    target_mod: str
    recall: dict[int, float]
    pool: int
    n_queries: int

    def baseline(self, k: int) -> float:
        """Expected recall of a uniformly random ranking of the candidate pool."""
        return min(k, self.pool) / self.pool


def _own_ranks(Q: np.ndarray, T: np.ndarray, own: np.ndarray) -> np.ndarray:
    """0-based rank of each query's own target among all candidates.

    Ties are broken in favour of candidates earlier in pool order.
    """
    qn = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    tn = T / np.linalg.norm(T, axis=1, keepdims=True)
    sims = qn @ tn.T
    own_sim = sims[np.arange(len(own)), own][:, None]
    cols = np.arange(T.shape[0])[None, :]
    ahead = (sims > own_sim) | ((sims == own_sim) & (cols < own[:, None]))
    return ahead.sum(axis=1)


def retrieval(query_mod: str, target_mod: str, embeddings: Sequence[LatentEmbedding],
              ks: Sequence[int] = (1, 5, 10), include_missing: bool = False) -> Retrieval:
    queries = _index(embeddings, query_mod, include_missing)
    targets = _index(embeddings, target_mod, include_missing)
    pool_ids = sorted(targets)
    pos = {s: j for j, s in enumerate(pool_ids)}
    eligible = [s for s in sorted(queries) if s in pos]
    if len(eligible) < 2:
        raise UndefinedMetric(f"{query_mod}->{target_mod}: fewer than 2 patients hold both modalities")
    Q = np.stack([queries[s] for s in eligible])
    T = np.stack([targets[s] for s in pool_ids])
    ranks = _own_ranks(Q, T, np.array([pos[s] for s in eligible]))
    recall = {int(k): float((ranks < k).mean()) for k in ks}
    return Retrieval(query_mod, target_mod, recall, len(pool_ids), len(eligible))


def recall_at_k(query_mod: str, target_mod: str, embeddings: Sequence[LatentEmbedding], k: int,
                include_missing: bool = False) -> float:
    return retrieval(query_mod, target_mod, embeddings, (k,), include_missing).recall[k]


def retrieval_table(embeddings: Sequence[LatentEmbedding], modalities: Sequence[str],
                    ks: Sequence[int] = (1, 5, 10), include_missing: bool = False) -> list[Retrieval]:
    """Retrieval for every ordered modality pair where it is defined."""
    out = []
    for q, t in itertools.permutations(modalities, 2):
        try:
            out.append(retrieval(q, t, embeddings, ks, include_missing))
        except UndefinedMetric:
            continue
    return out


def macro_recall(table: Sequence[Retrieval], k: int) -> tuple[float, float]:
    """Mean recall@k over ordered pairs and the matching mean random baseline."""
    if not table:
        raise UndefinedMetric("no modality pair has two or more eligible patients")
    return (float(np.mean([r.recall[k] for r in table])),
            float(np.mean([r.baseline(k) for r in table])))


def silhouette(vectors: np.ndarray, labels: Sequence) -> tuple[float, dict]:
    """Cosine-distance silhouette; singleton clusters score 0.

    Uses ``sum_j (1 - x.x_j) = n_c - x.S_c`` on unit vectors, so no pairwise
    matrix is formed.
    """
    X = np.asarray(vectors, dtype=np.float64)
    X = X / np.linalg.norm(X, axis=1, keepdims=True)
    labels = np.asarray(labels)
    uniq = list(dict.fromkeys(labels.tolist()))
    if len(uniq) < 2:
        raise UndefinedMetric("silhouette needs at least two labels")
    code = np.array([uniq.index(v) for v in labels.tolist()])
    sums = np.stack([X[code == c].sum(axis=0) for c in range(len(uniq))])
    sizes = np.bincount(code, minlength=len(uniq)).astype(np.float64)
    total_dist = sizes[None, :] - X @ sums.T  # (n, clusters)
    own = code
    n_own = sizes[own]
    self_dist = 1.0 - (X * X).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        a = (total_dist[np.arange(len(X)), own] - self_dist) / (n_own - 1)
        mean_other = total_dist / sizes[None, :]
    mean_other[np.arange(len(X)), own] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(n_own > 1, (b - a) / denom, 0.0)
    s = np.where((n_own > 1) & (denom == 0), 0.0, s)
    per_label = {uniq[c]: float(s[code == c].mean()) for c in range(len(uniq))}
    return float(s.mean()), per_label


def embedding_silhouette(embeddings: Sequence[LatentEmbedding], include_missing: bool = False):
    keep = [e for e in embeddings if include_missing or e.source == Source.ENCODED]
    return silhouette(np.stack([e.vector for e in keep]), [e.modality for e in keep])


def write_retrieval_csv(path, table: Sequence[Retrieval], ks: Sequence[int] = (1, 5, 10)) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "query_mod", "target_mod", "k", "value"])
        for r in table:
            for k in ks:
                w.writerow(["recall", r.query_mod, r.target_mod, k, repr(r.recall[k])])
                w.writerow(["random_baseline", r.query_mod, r.target_mod, k, repr(r.baseline(k))])
        if table:
            for k in ks:
                rec, base = macro_recall(table, k)
                w.writerow(["recall", "macro", "macro", k, repr(rec)])
                w.writerow(["random_baseline", "macro", "macro", k, repr(base)])


def write_silhouette_csv(path, overall: float, per_label: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["silhouette", "label", "value"])
        w.writerow(["silhouette", "overall", repr(overall)])
        for label, v in per_label.items():
            w.writerow(["silhouette", label, repr(v)])
