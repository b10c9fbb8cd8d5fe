"""Attention traces and modality-ablation analysis of a trained decoder."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .decoder import SeqDecoder
from .timeline import PREDICT, EmptyTimeline, EventTimeline, ablate_modality


@dataclass
class AttentionTrace:
    stay_id: str
    annotation: list[tuple[float, str]]
    heatmap: np.ndarray  # (T, T), head-averaged final layer
    trajectory: np.ndarray  # (n_slots, n_outputs) predictions
    record_ids: list[int] = field(default_factory=list)

    @property
    def predict_rows(self) -> np.ndarray:
        return np.array([i for i, (_, kind) in enumerate(self.annotation) if kind == PREDICT])


@dataclass
class AblationReport:
    baseline: AttentionTrace
    ablated: AttentionTrace
    removed_modality: str
    trajectory_divergence: float
    flip: bool
    attention_shift: dict[str, float]
    aligned: list[tuple[int, int]]  # (baseline slot, ablated slot) pairs for surviving events


def extract_trace(decoder: SeqDecoder, timeline: EventTimeline) -> AttentionTrace:
    traj, attention = decoder.forward(timeline)
    heat = attention[-1].mean(axis=0)
    return AttentionTrace(timeline.stay_id, timeline.annotation(), heat, traj.predictions(),
                          [e.record_id for e in timeline.events])


def modality_attention_mass(trace: AttentionTrace) -> dict[str, float]:
    """Attention received per position category, averaged over PREDICT rows.

    Categories are the event modalities plus ``PREDICT``; each row is a
    distribution, so the masses form a partition of 1.
    """
    kinds = [kind for _, kind in trace.annotation]
    rows = trace.predict_rows
    out: dict[str, float] = {}
    for cat in dict.fromkeys(kinds):
        cols = np.array([j for j, k in enumerate(kinds) if k == cat])
        out[cat] = float(trace.heatmap[np.ix_(rows, cols)].sum(axis=1).mean())
    return out


def compare_ablation(decoder: SeqDecoder, timeline: EventTimeline, modality: str,
                     threshold: float = 0.5) -> AblationReport:
    """Remove ``modality`` and compare trajectories and attention routing.

    Surviving slots are aligned by the identity of the event that precedes
    them; divergence is the mean absolute prediction difference over them.
    """
    base = extract_trace(decoder, timeline)
    if modality in timeline.modalities:
        ablated_tl = ablate_modality(timeline, modality)
    else:
        ablated_tl = timeline
    abl = extract_trace(decoder, ablated_tl)
    where = {rid: j for j, rid in enumerate(base.record_ids)}
    aligned = [(where[rid], j) for j, rid in enumerate(abl.record_ids)]
    diffs = [np.abs(base.trajectory[i] - abl.trajectory[j]).mean() for i, j in aligned]
    divergence = float(np.mean(diffs))
    flip = False
    if decoder.config.task != "los":
        flip = bool(((base.trajectory[-1] >= threshold) != (abl.trajectory[-1] >= threshold)).any())
    mb, ma = modality_attention_mass(base), modality_attention_mass(abl)
    shift = {k: ma.get(k, 0.0) - mb.get(k, 0.0) for k in dict.fromkeys(list(mb) + list(ma))}
    return AblationReport(base, abl, modality, divergence, flip, shift, aligned)


def sink_score(report: AblationReport, sink_modality: str) -> float:
    """Change in attention mass received by ``sink_modality``, ablated minus baseline."""
    mb = modality_attention_mass(report.baseline)
    ma = modality_attention_mass(report.ablated)
    if sink_modality not in mb or sink_modality not in ma:
        raise KeyError(f"{sink_modality!r} is not present in both traces")
    return ma[sink_modality] - mb[sink_modality]


def write_heatmap(csv_path, trace: AttentionTrace, json_path=None) -> None:
    """Heatmap as a CSV matrix plus a sidecar JSON of position annotations."""
    np.savetxt(csv_path, trace.heatmap, delimiter=",", fmt="%.17g")
    if json_path is None:
        json_path = str(csv_path).rsplit(".", 1)[0] + ".json"
    with open(json_path, "w") as fh:
        json.dump({"stay_id": trace.stay_id,
                   "positions": [{"index": i, "offset_minutes": off, "kind": kind}
                                 for i, (off, kind) in enumerate(trace.annotation)]}, fh, indent=1)


def write_trajectory_pair(path, report: AblationReport) -> None:
    """Rows per baseline slot; ``ablated_pred`` is empty where the event was removed."""
    matched = dict(report.aligned)
    offsets = [off for off, kind in report.baseline.annotation if kind == PREDICT]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", "offset", "baseline_pred", "ablated_pred"])
        for i, off in enumerate(offsets):
            b = report.baseline.trajectory[i, 0]
            a = report.ablated.trajectory[matched[i], 0] if i in matched else None
            w.writerow([i, repr(float(off)), repr(float(b)), "" if a is None else repr(float(a))])


__all__ = ["AttentionTrace", "AblationReport", "EmptyTimeline", "extract_trace", "modality_attention_mass",
           "compare_ablation", "sink_score", "write_heatmap", "write_trajectory_pair"]
