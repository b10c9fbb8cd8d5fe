"""Missingness-aware hybrid stratified splitting.

Stays with a patient id are grouped by patient and the patient is stratified
by the modality combination of their first stay; orphan stays (no patient id)
are stratified on their own combination. Within every stratum units are
shuffled under the seed and allocated 70/15/15 by largest remainder.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .synth import ModalityRecord

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
FRACTIONS = (0.70, 0.15, 0.15)
MIN_STRATUM = 3


@dataclass
class CohortSplit:
    assignment: dict[str, str]
    strata: dict[str, int]
    modalities: list[str]
    patient_of: dict[str, str | None] = field(default_factory=dict)
    fractions: tuple[float, float, float] = FRACTIONS

    def stays(self, split: str) -> list[str]:
        return sorted(s for s, v in self.assignment.items() if v == split)

    def check_leakage(self) -> None:
        seen: dict[str, str] = {}
        for stay, pid in self.patient_of.items():
            if pid is None:
                continue
            where = self.assignment[stay]
            if seen.setdefault(pid, where) != where:
                raise AssertionError(f"patient {pid} appears in both {seen[pid]} and {where}")


def combination_mask(present: Iterable[str], modalities: Sequence[str]) -> int:
    present = set(present)
    return sum(1 << i for i, m in enumerate(modalities) if m in present)


def allocate(n: int, fractions: Sequence[float] = FRACTIONS) -> list[int]:
    """Largest-remainder apportionment of ``n`` units; ties go to earlier splits."""
    quotas = [n * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratify(records: Sequence[ModalityRecord], seed: int, modalities: Sequence[str] | None = None) -> CohortSplit:
    if not records:
        raise ValueError("stratify: no records")
    if modalities is None:
        modalities = list(dict.fromkeys(r.modality for r in records))
    modalities = list(modalities)

    present: dict[str, set[str]] = defaultdict(set)
    first_offset: dict[str, float] = {}
    patient_of: dict[str, str | None] = {}
    for r in records:
        patient_of.setdefault(r.stay_id, r.patient_id)
        present[r.stay_id]
        if not r.absent:
            present[r.stay_id].add(r.modality)
            first_offset[r.stay_id] = min(first_offset.get(r.stay_id, np.inf), r.offset_minutes)
    strata = {s: combination_mask(mods, modalities) for s, mods in present.items()}

    # units: a patient (all its stays) or a single orphan stay
    units: dict[tuple, list[str]] = defaultdict(list)
    for stay in present:
        pid = patient_of[stay]
        units[("P", pid) if pid is not None else ("S", stay)].append(stay)

    by_stratum: dict[int, list[tuple]] = defaultdict(list)
    for key, stays in units.items():
        # first recorded stay: earliest admission offset, then stay id
        first = min(stays, key=lambda s: (first_offset.get(s, 0.0), s))
        by_stratum[strata[first]].append(key)

    rng = np.random.default_rng([seed, 31337])
    assignment: dict[str, str] = {}
    for stratum in sorted(by_stratum):
        keys = sorted(by_stratum[stratum])
        if len(keys) < MIN_STRATUM:
            log.warning("stratum %s has %d unit(s); assigning it to train", bin(stratum), len(keys))
            counts = [len(keys), 0, 0]
        else:
            counts = allocate(len(keys))
        perm = rng.permutation(len(keys))
        bounds = np.cumsum(counts)
        for pos, idx in enumerate(perm):
            split = SPLITS[int(np.searchsorted(bounds, pos, side="right"))]
            for stay in units[keys[idx]]:
                assignment[stay] = split

    out = CohortSplit(assignment, strata, modalities, patient_of)
    out.check_leakage()
    return out


def split_report(split: CohortSplit, records: Sequence[ModalityRecord] | None = None) -> list[dict]:
    """Per-split modality presence counts and patient/orphan stay counts.

    One row per split. ``present_<m>``/``missing_<m>`` count stays; presence is
    read from the stratum bitmask, so ``records`` is optional.
    """
    rows = []
    for name in SPLITS:
        stays = split.stays(name)
        row: dict = {"split": name, "stays": len(stays)}
        for i, m in enumerate(split.modalities):
            n_present = sum(1 for s in stays if split.strata[s] >> i & 1)
            row[f"present_{m}"] = n_present
            row[f"missing_{m}"] = len(stays) - n_present
            row[f"rate_{m}"] = n_present / len(stays) if stays else 0.0
        row["patient_stays"] = sum(1 for s in stays if split.patient_of.get(s) is not None)
        row["orphan_stays"] = len(stays) - row["patient_stays"]
        rows.append(row)
    return rows


def write_split_csv(path, split: CohortSplit) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stay_id", "split", "stratum_bitmask"])
        for stay in sorted(split.assignment):
            w.writerow([stay, split.assignment[stay], split.strata[stay]])


def read_split_csv(path, modalities: Sequence[str], patient_of: dict | None = None) -> CohortSplit:
    assignment, strata = {}, {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            assignment[row["stay_id"]] = row["split"]
            strata[row["stay_id"]] = int(row["stratum_bitmask"])
    return CohortSplit(assignment, strata, list(modalities), patient_of or {})
