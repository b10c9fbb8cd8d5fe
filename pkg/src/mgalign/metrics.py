"""Classification, regression and calibration metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

METRICS_HEADER = ["architecture", "initialization", "task", "metric", "value"]


class UndefinedMetric(ValueError):
    pass


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return y.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(s+ > s-) + P(s+ == s-)/2, via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both classes")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (R_n - R_{n-1}) * P_n."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of every block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = tp[ends].astype(np.float64)
    precision = tp / (ends + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def macro_auprc(scores, labels) -> float:
    return _macro(auprc, scores, labels)


def macro_auroc(scores, labels) -> float:
    return _macro(auroc, scores, labels)


def _macro(metric, scores, labels) -> float:
    """Mean of ``metric`` over classes (columns), skipping classes where it is undefined."""
    S = np.asarray(scores, dtype=np.float64)
    Y = np.asarray(labels)
    values, skipped = [], []
    for c in range(Y.shape[1]):
        try:
            values.append(metric(S[:, c], Y[:, c]))
        except UndefinedMetric:
            skipped.append(c)
    if skipped:
        log.info("%s: skipped %d classes without both labels: %s", metric.__name__, len(skipped), skipped)
    if not values:
        raise UndefinedMetric(f"{metric.__name__} undefined for every class")
    return float(np.mean(values))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        log.warning("correlation undefined: zero variance")
        return math.nan
    return float(dx @ dy / denom)


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    return pearson(rankdata(x), rankdata(y))


@dataclass
class RegressionReport:
    mse: float
    mae: float
    pearson: float
    spearman: float


def regression_suite(pred_hours, true_hours) -> RegressionReport:
    """Hour-scale errors and correlations. Undefined correlations are NaN."""
    p = np.asarray(pred_hours, dtype=np.float64)
    t = np.asarray(true_hours, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError("predictions and targets must be equal-length vectors")
    if len(p) < 3:
        raise UndefinedMetric("regression suite needs n >= 3")
    err = p - t
    return RegressionReport(float(np.mean(err ** 2)), float(np.mean(np.abs(err))), pearson(p, t), spearman(p, t))


def ace(probs, labels, n_bins: int = 10) -> float:
    """Adaptive calibration error over equal-count bins of sorted confidence."""
    p = np.asarray(probs, dtype=np.float64)
    y = _binary(labels)
    if ((p < 0) | (p > 1)).any():
        raise ValueError("probabilities must lie in [0, 1]")
    if len(p) == 0:
        raise UndefinedMetric("ACE of an empty set")
    if len(p) < n_bins:
        log.warning("ACE: %d samples < %d bins; using %d bins", len(p), n_bins, len(p))
        n_bins = len(p)
    order = np.argsort(p, kind="stable")
    gaps = [abs(p[b].mean() - y[b].mean()) for b in np.array_split(order, n_bins)]
    return float(np.mean(gaps))


def brier(probs, labels) -> float:
    p = np.asarray(probs, dtype=np.float64)
    return float(np.mean((p - _binary(labels)) ** 2))


def bss(probs, labels) -> float:
    """Brier skill score against the constant-prevalence forecast."""
    y = _binary(labels)
    base = brier(np.full(len(y), y.mean()), y)
    if base == 0.0:
        raise UndefinedMetric("BSS needs both classes")
    return 1.0 - brier(probs, y) / base


# ---------------------------------------------------------------------------
# task-level evaluation of decoder trajectories
# ---------------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def task_metrics(task: str, outputs, timelines) -> dict[str, float]:
    """Headline metrics from the final PREDICT slot of every stay."""
    final = np.stack([o.final_prediction for o in outputs])
    if task == "mortality":
        y = np.array([t.labels.mortality for t in timelines])
        p = _sigmoid(final[:, 0])
        out = {"auroc": auroc(p, y), "auprc": auprc(p, y), "ace": ace(p, y), "bss": bss(p, y)}
    elif task == "phenotyping":
        Y = np.stack([t.labels.phenotypes for t in timelines])
        P = _sigmoid(final)
        out = {"auroc": macro_auroc(P, Y), "auprc": macro_auprc(P, Y)}
    else:
        true = np.array([t.labels.los_hours for t in timelines])
        r = regression_suite(np.expm1(final[:, 0]), true)
        out = {"mse": r.mse, "mae": r.mae, "pearson": r.pearson, "spearman": r.spearman}
    return out


def per_slot_metrics(task: str, outputs, timelines, max_slot: int | None = None) -> list[tuple[int, str, float, int]]:
    """Metric at slot ``j`` over all stays with more than ``j`` events.

    Returns ``(slot, metric, value, n_stays)`` rows; slots where a metric is
    undefined are omitted.
    """
    n_slots = max(len(o.per_slot_logits) for o in outputs)
    if max_slot is not None:
        n_slots = min(n_slots, max_slot)
    rows = []
    for j in range(n_slots):
        keep = [i for i, o in enumerate(outputs) if len(o.per_slot_logits) > j]
        z = np.stack([outputs[i].per_slot_logits[j] for i in keep])
        try:
            if task == "mortality":
                y = np.array([timelines[i].labels.mortality for i in keep])
                rows.append((j, "auroc", auroc(_sigmoid(z[:, 0]), y), len(keep)))
            elif task == "phenotyping":
                Y = np.stack([timelines[i].labels.phenotypes for i in keep])
                rows.append((j, "auroc", macro_auroc(_sigmoid(z), Y), len(keep)))
            else:
                true = np.array([timelines[i].labels.los_hours for i in keep])
                rows.append((j, "mae", regression_suite(np.expm1(z[:, 0]), true).mae, len(keep)))
        except UndefinedMetric:
            continue
    return rows


def write_metrics_csv(path, rows: Sequence[tuple[str, str, str, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for arch, init, task, metric, value in rows:
            w.writerow([arch, init, task, metric, repr(float(value))])


def read_metrics_csv(path) -> list[tuple[str, str, str, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [(a, i, t, m, float(v)) for a, i, t, m, v in reader]


def write_slot_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot_index", "metric", "value", "n_stays"])
        for j, metric, value, n in rows:
            w.writerow([j, metric, repr(float(value)), n])
