import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mgalign import synth
from mgalign.metrics import auroc
from mgalign.synth import (GenerationError, GeneratorConfig, ModalityRecord, ModalitySpec, carry_forward_impute,
                           generate, preset, sign_log_scale)

SPECS = [ModalitySpec("a", 4, static=True), ModalitySpec("b", 6, events=(1, 3)), ModalitySpec("c", 5, events=(2, 4))]


def test_all_present():
    cohort = generate(GeneratorConfig(10, SPECS, [1.0, 1.0, 1.0], seed=1))
    assert len(cohort.labels) == 10
    assert not any(r.absent for r in cohort.records)
    assert {(s, r.modality) for r in cohort.records for s in [r.stay_id]} == {
        (s, m) for s in cohort.labels for m in "abc"}


def test_all_absent_is_error():
    with pytest.raises(GenerationError):
        generate(GeneratorConfig(10, SPECS, [0.0, 0.0, 0.0]))


def test_byte_identical_output(tmp_path):
    cfg = preset("mimic-like", 50, seed=3)
    synth.save_cohort(tmp_path / "a", generate(cfg))
    synth.save_cohort(tmp_path / "b", generate(cfg))
    for name in ("records.jsonl", "labels.csv", "modalities.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_record_invariants():
    cohort = generate(preset("mimic-like", 300, seed=0))
    static = {m.name for m in cohort.modalities if m.static}
    for r in cohort.records:
        if r.absent:
            assert r.features is None
        if r.modality in static:
            assert r.offset_minutes == 0.0
        assert r.offset_minutes >= 0.0
    for lab in cohort.labels.values():
        assert 12 <= lab.los_hours <= 720
        assert lab.mortality in (0, 1)
        assert lab.phenotypes.shape == (25,) and set(np.unique(lab.phenotypes)) <= {0, 1}
    for stay, recs in cohort.by_stay().items():
        assert any(not r.absent for r in recs)


def test_presence_rates_match_probabilities():
    # rates are measured over every drawn stay, before empty stays are dropped
    for name in ("mimic-like", "eicu-like"):
        cfg = preset(name, 6000, seed=7)
        cohort = generate(cfg)
        assert cohort.n_drawn >= 10_000 or name == "eicu-like"
        rates = cohort.drawn_presence / cohort.n_drawn
        assert np.abs(rates - np.array(cfg.presence_probs)).max() < 0.02


def test_presets_missingness_regimes():
    mimic = generate(preset("mimic-like", 1500, seed=0))
    eicu = generate(preset("eicu-like", 1500, seed=0))

    def counts(c):
        return np.array([len({r.modality for r in recs if not r.absent}) for recs in c.by_stay().values()])

    def full_share(c):
        return np.mean(counts(c) == len(c.modalities))

    def single_share(c):
        return np.mean(counts(c) == 1)

    assert full_share(eicu) > 0.5
    assert single_share(mimic) > single_share(eicu)
    assert single_share(mimic) > 0.4


def test_latent_probe_recovers_mortality():
    cohort = generate(preset("mimic-like", 3000, seed=2))
    stays = list(cohort.labels)
    X = np.stack([cohort.latent[s] for s in stays])
    X = np.c_[X, np.ones(len(X))]
    y = np.array([cohort.labels[s].mortality for s in stays])
    half = len(stays) // 2
    w, *_ = np.linalg.lstsq(X[:half], y[:half] * 2.0 - 1.0, rcond=None)
    assert auroc(X[half:] @ w, y[half:]) > 0.95


def test_sign_log_scale_examples():
    assert sign_log_scale(0.0) == 0.0
    assert sign_log_scale(math.e - 1) == pytest.approx(1.0, abs=1e-15)
    assert sign_log_scale(-1.0) == pytest.approx(-0.6931471805599453, abs=1e-15)


@given(st.floats(-1e6, 1e6))
def test_sign_log_scale_odd_and_monotone(x):
    assert sign_log_scale(-x) == -sign_log_scale(x)
    assert sign_log_scale(x + 1.0) >= sign_log_scale(x)


def test_carry_forward_examples():
    assert carry_forward_impute([(0, 5), (1, None), (2, None)], 0.0) == [(0, 5), (1, 5), (2, 5)]
    assert carry_forward_impute([(0, None), (1, 7)], 3.0) == [(0, 3.0), (1, 7)]
    full = [(0, 1.0), (1, 2.0), (2, 3.0)]
    assert carry_forward_impute(full, 9.0) == full


def test_carry_forward_rejects_unsorted():
    with pytest.raises(ValueError):
        carry_forward_impute([(1, 1.0), (0, 2.0)], 0.0)


def test_serialization_round_trip(tmp_path):
    cohort = generate(preset("sink-engineered", 40, seed=1))
    synth.save_cohort(tmp_path, cohort)
    back = synth.load_cohort(tmp_path)
    assert back.modalities == cohort.modalities
    assert len(back.records) == len(cohort.records)
    for a, b in zip(cohort.records, back.records):
        assert (a.stay_id, a.modality, a.offset_minutes, a.record_id) == (b.stay_id, b.modality, b.offset_minutes,
                                                                        b.record_id)
        assert (a.features is None and b.features is None) or np.array_equal(a.features, b.features)
    for s, lab in cohort.labels.items():
        assert back.labels[s].mortality == lab.mortality
        assert np.array_equal(back.labels[s].phenotypes, lab.phenotypes)
        assert back.labels[s].los_hours == lab.los_hours
    header = (tmp_path / "labels.csv").read_text().splitlines()[0]
    assert header == ",".join(["stay_id", "mortality"] + [f"pheno_{i}" for i in range(25)] + ["los_hours"])


def test_record_json_round_trip():
    r = ModalityRecord("P1", "S1", "a", 0.0, None, 3)
    assert ModalityRecord.from_json(r.to_json()).absent


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset("nope")
