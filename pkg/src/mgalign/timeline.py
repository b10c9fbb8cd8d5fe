"""Chronological multimodal event sequences with interleaved PREDICT slots.

A timeline of ``n`` events is laid out as ``e0 P0 e1 P1 ... e(n-1) P(n-1)``:
event ``j`` sits at sequence index ``2j`` and its PREDICT slot at ``2j + 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .synth import ModalityRecord, StayLabels

PREDICT = "PREDICT"
MAX_EVENTS = 64


class EmptyTimeline(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    offset_minutes: float
    modality: str
    record_id: int
    features: np.ndarray = field(repr=False, compare=False)
    source: str = "ENCODED"


@dataclass
class EventTimeline:
    stay_id: str
    events: list[Event]
    labels: StayLabels | None = None

    def __len__(self) -> int:
        return 2 * len(self.events)

    @property
    def predict_slots(self) -> list[int]:
        return [2 * j + 1 for j in range(len(self.events))]

    @property
    def modalities(self) -> list[str]:
        return list(dict.fromkeys(e.modality for e in self.events))

    def annotation(self) -> list[tuple[float, str]]:
        out = []
        for e in self.events:
            out.append((e.offset_minutes, e.modality))
            out.append((e.offset_minutes, PREDICT))
        return out

    def to_json(self) -> dict:
        return {"stay_id": self.stay_id,
                "events": [[e.offset_minutes, e.modality, e.source] for e in self.events]}


def assemble(records: Sequence[ModalityRecord], modality_order: Sequence[str],
             labels: StayLabels | None = None, max_events: int = MAX_EVENTS,
             static: Iterable[str] = ()) -> EventTimeline:
    """Sort a stay's present records into a timeline.

    Order is (offset, modality order, record id); static modalities are
    pinned to offset 0. Stays longer than ``max_events`` keep their most
    recent events.
    """
    rank = {m: i for i, m in enumerate(modality_order)}
    static = set(static)
    present = [r for r in records if not r.absent]
    if not present:
        raise EmptyTimeline("stay has no present records")
    stay_ids = {r.stay_id for r in present}
    if len(stay_ids) != 1:
        raise ValueError(f"assemble expects one stay, got {sorted(stay_ids)}")
    events = [Event(0.0 if r.modality in static else float(r.offset_minutes), r.modality, r.record_id,
                    r.features) for r in present]
    events.sort(key=lambda e: (e.offset_minutes, rank.get(e.modality, len(rank)), e.record_id))
    if len(events) > max_events:
        events = events[-max_events:]
    return EventTimeline(present[0].stay_id, events, labels)


def ablate_modality(timeline: EventTimeline, modality: str) -> EventTimeline:
    """Drop every event of ``modality`` together with its PREDICT slot."""
    kept = [e for e in timeline.events if e.modality != modality]
    if not kept:
        raise EmptyTimeline(f"removing {modality!r} leaves stay {timeline.stay_id} empty")
    return replace(timeline, events=kept)


def build_timelines(records: Sequence[ModalityRecord], modality_order: Sequence[str],
                    labels: dict[str, StayLabels] | None = None, stay_ids: Sequence[str] | None = None,
                    static: Iterable[str] = (), max_events: int = MAX_EVENTS) -> list[EventTimeline]:
    grouped: dict[str, list[ModalityRecord]] = {}
    for r in records:
        grouped.setdefault(r.stay_id, []).append(r)
    if stay_ids is None:
        stay_ids = list(grouped)
    out = []
    for s in stay_ids:
        try:
            out.append(assemble(grouped.get(s, []), modality_order, None if labels is None else labels[s],
                                max_events, static))
        except EmptyTimeline:
            continue
    return out


def write_timelines_jsonl(path, timelines: Iterable[EventTimeline]) -> None:
    with open(path, "w") as fh:
        for t in timelines:
            fh.write(json.dumps(t.to_json()) + "\n")


def random_modality_removal(timeline: EventTimeline, rng: np.random.Generator) -> EventTimeline:
    """Remove one uniformly chosen modality when the stay has two or more."""
    mods = timeline.modalities
    if len(mods) < 2:
        return timeline
    return ablate_modality(timeline, mods[int(rng.integers(len(mods)))])
