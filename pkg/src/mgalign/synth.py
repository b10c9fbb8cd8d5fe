"""Synthetic multimodal ICU cohorts with controllable modality missingness.

Every stay draws a hidden latent state ``s`` (dim 16) and a deterioration
vector ``delta``. An event of modality ``i`` observed at a fraction ``phi`` of
the observation window carries the features ``W_i (s + phi * delta) + noise``
restricted to the latent coordinates that modality can see. Labels are
thresholded linear functions of the latent state plus a little noise.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

log = logging.getLogger(__name__)

LATENT_DIM = 16
N_PHENOTYPES = 25
OBSERVATION_MINUTES = 720.0  # events fall in the first 12 h, the minimum retained stay
LOS_RANGE = (12.0, 720.0)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    dim: int
    static: bool = False
    events: tuple[int, int] = (1, 1)
    noise: float = 0.1
    # latent coordinates this modality observes; None means all of them
    view: tuple[int, ...] | None = None
    # loading of the patient's private factor, a signal no other modality shares
    private: float = 0.0


@dataclass
class ModalityRecord:
    patient_id: str | None
    stay_id: str
    modality: str
    offset_minutes: float
    features: np.ndarray | None
    record_id: int = 0

    @property
    def absent(self) -> bool:
        return self.features is None

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "patient_id": self.patient_id, "stay_id": self.stay_id,
                "modality": self.modality, "offset_minutes": self.offset_minutes,
                "features": None if self.features is None else self.features.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "ModalityRecord":
        feats = doc.get("features")
        return cls(patient_id=doc.get("patient_id"), stay_id=doc["stay_id"], modality=doc["modality"],
                   offset_minutes=float(doc["offset_minutes"]),
                   features=None if feats is None else np.asarray(feats, dtype=np.float64),
                   record_id=int(doc.get("record_id", 0)))


@dataclass
class StayLabels:
    mortality: int
    phenotypes: np.ndarray
    los_hours: float


@dataclass
class LabelModel:
    """How labels are read off the latent state."""

    mortality_prevalence: float = 0.2
    mortality_noise: float = 0.1
    # weight of the deterioration vector in the mortality risk score
    deterioration_weight: float = 1.0
    # latent coordinates carrying mortality risk; None means all
    risk_dims: tuple[int, ...] | None = None
    phenotype_noise: float = 0.3
    los_noise: float = 0.2
    # weight of the patient's private factor in the mortality risk score
    private_weight: float = 0.0


@dataclass
class GeneratorConfig:
    n_patients: int
    modalities: list[ModalitySpec]
    presence_probs: list[float]
    events_per_stay: tuple[int, int] = (1, 64)
    label_model: LabelModel = field(default_factory=LabelModel)
    seed: int = 0
    stays_per_patient: tuple[int, int] = (1, 1)
    orphan_fraction: float = 0.0
    # seeds the fixed feature views and label weights; defaults to ``seed``
    world_seed: int | None = None

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if len(self.presence_probs) != len(self.modalities):
            raise ValueError("presence_probs needs one entry per modality")
        if any(not 0.0 <= p <= 1.0 for p in self.presence_probs):
            raise ValueError("presence_probs must lie in [0, 1]")
        lo, hi = self.events_per_stay
        if not 1 <= lo <= hi:
            raise ValueError("events_per_stay must be a range with 1 <= lo <= hi")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError("modality names must be unique")
        if not 0.0 <= self.orphan_fraction <= 1.0:
            raise ValueError("orphan_fraction must lie in [0, 1]")

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]


@dataclass
class Cohort:
    """Generated records and labels; unpacks as ``records, labels``."""

    records: list[ModalityRecord]
    labels: dict[str, StayLabels]
    modalities: list[ModalitySpec]
    n_drawn: int = 0
    drawn_presence: np.ndarray | None = None
    latent: dict[str, np.ndarray] = field(default_factory=dict)

    def __iter__(self):
        yield self.records
        yield self.labels

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def stays(self) -> list[str]:
        return list(self.labels)

    def by_stay(self) -> dict[str, list[ModalityRecord]]:
        return group_by_stay(self.records)

    def subset(self, stay_ids: Iterable[str]) -> "Cohort":
        keep = set(stay_ids)
        return Cohort([r for r in self.records if r.stay_id in keep],
                      {s: l for s, l in self.labels.items() if s in keep},
                      self.modalities, latent={s: v for s, v in self.latent.items() if s in keep})


def group_by_stay(records: Iterable[ModalityRecord]) -> dict[str, list[ModalityRecord]]:
    out: dict[str, list[ModalityRecord]] = {}
    for r in records:
        out.setdefault(r.stay_id, []).append(r)
    return out


def sign_log_scale(x):
    """Sign-preserving log transform ``sgn(x) * log(1 + |x|)``."""
    return np.sign(x) * np.log1p(np.abs(x))


def carry_forward_impute(series: Sequence[tuple[float, float | None]], global_normal: float):
    """Fill missing hourly bins with the last observed value.

    Bins before the first observation take ``global_normal``.
    """
    bins = [b for b, _ in series]
    if any(b2 < b1 for b1, b2 in zip(bins, bins[1:])):
        raise ValueError("carry_forward_impute: bins must be sorted ascending")
    out = []
    last = None
    for b, v in series:
        if v is not None and not (isinstance(v, float) and math.isnan(v)):
            last = v
        out.append((b, global_normal if last is None else last))
    return out


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class _World:
    views: dict[str, np.ndarray]
    risk: np.ndarray
    risk_delta: np.ndarray
    pheno: np.ndarray
    los: np.ndarray
    scale: float
    threshold: float
    pheno_thresholds: np.ndarray
    private_dirs: dict[str, np.ndarray]


def _make_world(config: GeneratorConfig) -> _World:
    rng = np.random.default_rng([config.seed if config.world_seed is None else config.world_seed, 7919])
    views = {}
    for spec in config.modalities:
        cols = np.arange(LATENT_DIM) if spec.view is None else np.asarray(spec.view, dtype=np.int64)
        W = np.zeros((spec.dim, LATENT_DIM))
        if len(cols):
            W[:, cols] = rng.normal(size=(spec.dim, len(cols))) / math.sqrt(len(cols))
        views[spec.name] = W
    lm = config.label_model
    risk = rng.normal(size=LATENT_DIM)
    if lm.risk_dims is not None:
        keep = np.zeros(LATENT_DIM, dtype=bool)
        keep[list(lm.risk_dims)] = True
        risk[~keep] = 0.0
    risk /= np.linalg.norm(risk)
    risk_delta = risk * lm.deterioration_weight
    pheno = rng.normal(size=(N_PHENOTYPES, LATENT_DIM)) / math.sqrt(LATENT_DIM)
    los = rng.normal(size=LATENT_DIM) / math.sqrt(LATENT_DIM)
    # risk = risk.s + risk_delta.delta + w_p * a has variance 1 + w^2 / 4 + w_p^2
    scale = math.sqrt(1.0 + 0.25 * lm.deterioration_weight ** 2 + lm.private_weight ** 2)
    threshold = scale * norm.ppf(1.0 - lm.mortality_prevalence)
    prevalences = np.linspace(0.05, 0.4, N_PHENOTYPES)
    row_sd = np.sqrt((pheno ** 2).sum(axis=1) + lm.phenotype_noise ** 2)
    pheno_thresholds = row_sd * norm.ppf(1.0 - prevalences)
    private_dirs = {}
    for spec in config.modalities:
        u = rng.normal(size=spec.dim)
        private_dirs[spec.name] = u / np.linalg.norm(u)
    return _World(views, risk, risk_delta, pheno, los, scale, threshold, pheno_thresholds, private_dirs)


def generate(config: GeneratorConfig) -> Cohort:
    """Draw a cohort; stays whose modalities all came up absent are dropped."""
    config.validate()
    world = _make_world(config)
    rng = np.random.default_rng([config.seed, 104729])
    # separate stream so that regimes without a private factor draw identically
    private_rng = np.random.default_rng([config.seed, 15485863])
    lm = config.label_model
    specs = config.modalities
    probs = np.asarray(config.presence_probs, dtype=np.float64)

    records: list[ModalityRecord] = []
    labels: dict[str, StayLabels] = {}
    latent: dict[str, np.ndarray] = {}
    n_drawn = 0
    drawn_presence = np.zeros(len(specs))
    stay_counter = 0
    record_id = 0
    lo_events, hi_events = config.events_per_stay

    for p in range(config.n_patients):
        n_stays = int(rng.integers(config.stays_per_patient[0], config.stays_per_patient[1] + 1))
        patient_state = rng.normal(size=LATENT_DIM)
        private = float(private_rng.normal())
        orphan = rng.random() < config.orphan_fraction
        patient_id = None if orphan else f"P{p:06d}"
        for _ in range(n_stays):
            stay_id = f"S{stay_counter:07d}"
            stay_counter += 1
            s = math.sqrt(0.5) * patient_state + math.sqrt(0.5) * rng.normal(size=LATENT_DIM)
            delta = 0.5 * rng.normal(size=LATENT_DIM)
            present = rng.random(len(specs)) < probs
            counts = [int(rng.integers(m.events[0], m.events[1] + 1)) if not m.static else 1 for m in specs]
            n_drawn += 1
            drawn_presence += present
            if not present.any():
                continue
            # cap the total number of events, dropping dynamic events first
            total = sum(c for c, on in zip(counts, present) if on)
            budget = max(lo_events, min(hi_events, total))
            while total > budget:
                j = max((k for k in range(len(specs)) if present[k] and not specs[k].static),
                        key=lambda k: counts[k], default=None)
                if j is None or counts[j] <= 1:
                    break
                counts[j] -= 1
                total -= 1

            risk = world.risk @ s + world.risk_delta @ delta + lm.private_weight * private
            mortality = int(risk + lm.mortality_noise * rng.normal() > world.threshold)
            pheno_score = world.pheno @ s + lm.phenotype_noise * rng.normal(size=N_PHENOTYPES)
            phenotypes = (pheno_score > world.pheno_thresholds).astype(np.int64)
            los_hours = float(np.clip(math.exp(math.log(72.0) + 0.8 * world.los @ s
                                               + 0.4 * risk + lm.los_noise * rng.normal()), *LOS_RANGE))
            labels[stay_id] = StayLabels(mortality, phenotypes, los_hours)
            latent[stay_id] = np.concatenate([s, delta, [private]])

            for k, spec in enumerate(specs):
                if not present[k]:
                    records.append(ModalityRecord(patient_id, stay_id, spec.name, 0.0, None, record_id))
                    record_id += 1
                    continue
                if spec.static:
                    offsets = np.zeros(1)
                else:
                    offsets = np.sort(rng.uniform(0.0, OBSERVATION_MINUTES, size=counts[k]))
                W = world.views[spec.name]
                for off in offsets:
                    phi = off / OBSERVATION_MINUTES
                    x = W @ (s + phi * delta) + spec.noise * rng.normal(size=spec.dim)
                    if spec.private:
                        x = x + spec.private * private * world.private_dirs[spec.name]
                    records.append(ModalityRecord(patient_id, stay_id, spec.name, float(off), x, record_id))
                    record_id += 1

    if not labels:
        raise GenerationError("no stay has any modality present; nothing to generate")
    return Cohort(records, labels, list(specs), n_drawn, drawn_presence, latent)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

MIMIC_MODALITIES = [
    ModalitySpec("timeseries", 16, events=(2, 8)),
    ModalitySpec("cxr", 12, events=(1, 2)),
    ModalitySpec("discharge_note", 12, events=(1, 1)),
    ModalitySpec("radiology_note", 12, events=(1, 3)),
    ModalitySpec("demographics", 8, static=True),
]

EICU_MODALITIES = [
    ModalitySpec("demographics", 8, static=True),
    ModalitySpec("diagnosis", 12, events=(1, 4)),
    ModalitySpec("treatment", 12, events=(1, 4)),
    ModalitySpec("medication", 12, events=(1, 4)),
    ModalitySpec("lab", 16, events=(2, 8)),
    ModalitySpec("aps", 8, static=True),
]

SINK_MODALITIES = [
    ModalitySpec("demographics", 8, static=True, noise=0.3, view=(0, 1, 2, 3), private=1.5),
    ModalitySpec("timeseries", 16, events=(2, 6), noise=0.1),
    ModalitySpec("notes", 12, events=(1, 3), noise=0.3, view=tuple(range(8, 16))),
]


def preset(name: str, n_patients: int = 2000, seed: int = 0) -> GeneratorConfig:
    """Shipped regimes: ``mimic-like``, ``eicu-like`` and ``sink-engineered``."""
    if name == "mimic-like":
        # independent presence; roughly 60% of retained stays carry one modality
        return GeneratorConfig(n_patients, list(MIMIC_MODALITIES), [0.45, 0.25, 0.15, 0.25, 0.2],
                               seed=seed, stays_per_patient=(1, 3), orphan_fraction=0.1)
    if name == "eicu-like":
        return GeneratorConfig(n_patients, list(EICU_MODALITIES), [0.99, 0.92, 0.92, 0.92, 0.95, 0.94],
                               seed=seed, stays_per_patient=(1, 2), orphan_fraction=0.05)
    if name == "sink-engineered":
        # demographics carries a private risk factor and part of the risk subspace;
        # timeseries sees the whole latent state, notes only its non-risk half
        return GeneratorConfig(n_patients, list(SINK_MODALITIES), [1.0, 0.9, 0.8], seed=seed,
                               label_model=LabelModel(risk_dims=(0, 1, 2, 3, 4, 5, 6, 7), private_weight=0.7),
                               stays_per_patient=(1, 1))
    raise KeyError(f"unknown preset {name!r}; choose mimic-like, eicu-like or sink-engineered")


PRESETS = ("mimic-like", "eicu-like", "sink-engineered")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def write_records_jsonl(path, records: Iterable[ModalityRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_records_jsonl(path) -> list[ModalityRecord]:
    with open(path) as fh:
        return [ModalityRecord.from_json(json.loads(line)) for line in fh if line.strip()]


LABEL_HEADER = ["stay_id", "mortality"] + [f"pheno_{i}" for i in range(N_PHENOTYPES)] + ["los_hours"]


def write_labels_csv(path, labels: dict[str, StayLabels]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_HEADER)
        for stay_id, lab in labels.items():
            w.writerow([stay_id, lab.mortality, *map(int, lab.phenotypes), repr(lab.los_hours)])


def read_labels_csv(path) -> dict[str, StayLabels]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != LABEL_HEADER:
            raise ValueError(f"{path}: unexpected label header")
        for row in reader:
            out[row[0]] = StayLabels(int(row[1]), np.array([int(v) for v in row[2:2 + N_PHENOTYPES]]),
                                     float(row[-1]))
    return out


def modalities_to_json(specs: Sequence[ModalitySpec]) -> list[dict]:
    return [{**asdict(s), "events": list(s.events), "view": None if s.view is None else list(s.view)}
            for s in specs]


def modalities_from_json(docs: Sequence[dict]) -> list[ModalitySpec]:
    return [ModalitySpec(d["name"], d["dim"], d.get("static", False), tuple(d.get("events", (1, 1))),
                         d.get("noise", 0.1), None if d.get("view") is None else tuple(d["view"]),
                         d.get("private", 0.0))
            for d in docs]


def save_cohort(directory, cohort: Cohort) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_records_jsonl(directory / "records.jsonl", cohort.records)
    write_labels_csv(directory / "labels.csv", cohort.labels)
    (directory / "modalities.json").write_text(json.dumps(modalities_to_json(cohort.modalities), indent=1))


def load_cohort(directory) -> Cohort:
    directory = Path(directory)
    specs = modalities_from_json(json.loads((directory / "modalities.json").read_text()))
    return Cohort(read_records_jsonl(directory / "records.jsonl"), read_labels_csv(directory / "labels.csv"), specs)
