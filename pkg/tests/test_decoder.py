import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mgalign.decoder import (DecoderConfig, DegenerateLabels, FinetuneConfig, SeqDecoder, SequenceTooLong,
                             TaskWeights, batch_loss, evaluate_decoder_loss, finetune, loss_los, loss_mortality,
                             loss_phenotyping, los_target, mortality_pos_weight, phenotype_pos_weights,
                             write_trajectories_csv)
from mgalign.encoders import EncoderBank
from mgalign.nn import Tensor, grad_check, parameter
from mgalign.synth import ModalitySpec, StayLabels
from mgalign.timeline import Event, EventTimeline

SPECS = [ModalitySpec("a", 3), ModalitySpec("b", 4)]
RID = iter(range(10**9))


def make_bank(seed=0):
    return EncoderBank(SPECS, latent_dim=6, hidden=8, seed=seed)


def make_timeline(rng, n_events, stay="S1", mortality=0, los=48.0, mods=None):
    events = []
    offsets = np.sort(rng.uniform(0, 720, size=n_events))
    for j in range(n_events):
        m = SPECS[(j if mods is None else mods[j]) % 2]
        events.append(Event(float(offsets[j]), m.name, next(RID), rng.normal(size=m.dim)))
    return EventTimeline(stay, events, StayLabels(mortality, rng.integers(0, 2, size=25), los))


def make_decoder(task="mortality", seed=0, **kw):
    cfg = DecoderConfig(d_model=8, layers=2, heads=2, ffn_mult=2, dropout=0.0, task=task, max_len=32, **kw)
    return SeqDecoder(cfg, make_bank().freeze(), seed=seed)


def naive_bce(z, y, w):
    return -(w * y * math.log(1 / (1 + math.exp(-z))) + (1 - y) * math.log(1 - 1 / (1 + math.exp(-z))))


# -- forward ----------------------------------------------------------------

def test_one_event_one_slot(rng):
    traj, attn = make_decoder().forward(make_timeline(rng, 1))
    assert traj.per_slot_logits.shape == (1, 1)
    assert attn[-1].shape == (2, 2, 2)


def test_attention_rows_and_causal_support(rng):
    _, attn = make_decoder().forward(make_timeline(rng, 5))
    w = attn[-1]
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert (np.triu(w, k=1) == 0).all()


def test_phenotyping_shape_and_slots(rng):
    traj, _ = make_decoder("phenotyping").forward(make_timeline(rng, 4))
    assert traj.per_slot_logits.shape == (4, 25)


def test_swapping_events_changes_logits(rng):
    dec = make_decoder()
    t = make_timeline(rng, 3)
    e = t.events
    swapped = EventTimeline(t.stay_id, [e[1].__class__(e[0].offset_minutes, e[1].modality, e[1].record_id, e[1].features),
                                        e[0].__class__(e[1].offset_minutes, e[0].modality, e[0].record_id, e[0].features),
                                        e[2]], t.labels)
    a = dec.forward(t)[0].final_prediction
    b = dec.forward(swapped)[0].final_prediction
    assert not np.allclose(a, b)


@given(st.integers(0, 10_000), st.integers(2, 10))
def test_future_mutation_is_bit_exact(seed, n):
    rng = np.random.default_rng(seed)
    dec = make_decoder(seed=seed % 7)
    t = make_timeline(rng, n)
    cut = int(rng.integers(1, n))
    mutated = EventTimeline(t.stay_id, t.events[:cut] + [
        Event(e.offset_minutes + 1.0, e.modality, e.record_id, rng.normal(size=e.features.shape)) for e in t.events[cut:]])
    truncated = EventTimeline(t.stay_id, t.events[:cut])
    base = dec.forward(t)[0].per_slot_logits[:cut]
    assert np.array_equal(base, dec.forward(mutated)[0].per_slot_logits[:cut])
    assert np.array_equal(base, dec.forward(truncated)[0].per_slot_logits)


def test_batch_matches_single(rng):
    dec = make_decoder()
    tls = [make_timeline(rng, n, stay=f"S{n}") for n in (1, 4, 7)]
    for single, batched in zip([dec.forward(t)[0] for t in tls], dec.predict(tls)):
        assert np.allclose(single.per_slot_logits, batched.per_slot_logits, atol=1e-12)


def test_sequence_too_long(rng):
    with pytest.raises(SequenceTooLong):
        make_decoder().forward(make_timeline(rng, 17))


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(d_model=10, heads=4).validate()
    with pytest.raises(ValueError):
        DecoderConfig(task="survival").validate()


# -- losses -----------------------------------------------------------------

def test_loss_examples():
    assert loss_mortality(Tensor(np.zeros((3, 1))), 1).item() == pytest.approx(math.log(2), abs=1e-15)
    assert loss_mortality(Tensor(np.full((2, 1), 40.0)), 1).item() < 1e-15
    assert loss_mortality(Tensor(np.full((2, 1), -40.0)), 0).item() < 1e-15
    ph = loss_phenotyping(Tensor(np.zeros((4, 25))), np.ones(25), np.ones(25)).item()
    assert ph == pytest.approx(25 * math.log(2), abs=1e-13)
    assert los_target(12.0) == pytest.approx(2.5649493574615367, abs=1e-15)
    assert loss_los(Tensor(np.full((3, 1), math.log(13.0))), 12.0).item() == 0.0


def test_mortality_loss_naive_oracle(rng):
    for _ in range(50):
        z = rng.normal(size=3) * 3
        y, w = int(rng.integers(0, 2)), float(rng.uniform(0.5, 20))
        expected = np.mean([naive_bce(v, y, w) for v in z])
        assert loss_mortality(Tensor(z[:, None]), y, w).item() == pytest.approx(expected, abs=1e-12)


def test_phenotyping_loss_naive_oracle(rng):
    for _ in range(20):
        Z = rng.normal(size=(3, 25)) * 2
        y = rng.integers(0, 2, size=25)
        w = rng.uniform(0.5, 100, size=25)
        expected = np.mean([sum(naive_bce(Z[s, c], y[c], w[c]) for c in range(25)) for s in range(3)])
        assert loss_phenotyping(Tensor(Z), y, w).item() == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_single_class_phenotyping_is_mortality(rng):
    z = rng.normal(size=(4, 1))
    assert loss_phenotyping(Tensor(z), np.array([1]), np.array([3.0])).item() == \
        pytest.approx(loss_mortality(Tensor(z), 1, 3.0).item(), abs=1e-15)


def test_los_constant_optimum(rng):
    hours = rng.uniform(12, 720, size=30)
    best = np.mean(np.log1p(hours))
    total = lambda c: sum(loss_los(Tensor(np.array([[c]])), h).item() for h in hours)
    assert total(best) < total(best + 1e-3) and total(best) < total(best - 1e-3)


def test_loss_errors():
    with pytest.raises(ValueError):
        los_target(11.9)
    with pytest.raises(ValueError):
        loss_los(Tensor(np.zeros((1, 1))), 721.0)
    with pytest.raises(ValueError):
        loss_mortality(Tensor(np.zeros((1, 1))), 2)
    with pytest.raises(DegenerateLabels):
        mortality_pos_weight([0, 0, 0])
    assert mortality_pos_weight([1, 0, 0, 0]) == 3.0


def test_phenotype_weights_capped_with_warning(caplog):
    labels = np.zeros((300, 25), dtype=int)
    labels[:150, 0] = 1
    labels[:1, 1] = 1
    w = phenotype_pos_weights(labels)
    assert w[0] == 1.0 and w[1] == 100.0 and w[2] == 100.0
    assert "never positive" in caplog.text


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    z = parameter(rng.normal(size=(3, 1)))
    Z = parameter(rng.normal(size=(3, 25)))
    y = rng.integers(0, 2, size=25)
    w = rng.uniform(0.5, 5, size=25)
    assert grad_check(lambda: loss_mortality(z, 1, 4.0), [z]) < 1e-4
    assert grad_check(lambda: loss_phenotyping(Z, y, w), [Z]) < 1e-4
    assert grad_check(lambda: loss_los(z, 100.0), [z]) < 1e-4


@pytest.mark.parametrize("task", ["mortality", "phenotyping", "los"])
def test_full_decoder_gradient(task):
    rng = np.random.default_rng(3)
    cfg = DecoderConfig(d_model=4, layers=1, heads=2, ffn_mult=2, dropout=0.0, task=task, max_len=8)
    dec = SeqDecoder(cfg, make_bank(), seed=1)
    tls = [make_timeline(rng, 3, mortality=1), make_timeline(rng, 2, mortality=0)]
    weights = TaskWeights(1.5, np.full(25, 2.0))

    def f():
        out, pk, _ = dec.forward_batch(tls)
        return batch_loss(task, out, pk, tls, weights)

    params = dec.decoder_parameters() if task == "phenotyping" else dec.parameters()
    assert grad_check(f, params) < 1e-4


# -- fine-tuning --------------------------------------------------------------

def toy_split(rng, n):
    out = []
    for i in range(n):
        y = int(rng.random() < 0.4)
        t = make_timeline(rng, int(rng.integers(1, 6)), stay=f"S{i}", mortality=y)
        for e in t.events:  # label signal in the first feature
            e.features[0] = 2.0 * y - 1.0 + 0.3 * rng.normal()
        out.append(t)
    return out


def test_finetune_improves_validation_loss(rng, tmp_path):
    train, val = toy_split(rng, 80), toy_split(rng, 40)
    dec = make_decoder()
    weights = TaskWeights.from_timelines("mortality", train)
    before = evaluate_decoder_loss(dec, val, weights)
    res = finetune(dec, train, val, FinetuneConfig(epochs=8, lr=1e-2, drop_p=0.0, patience=8),
                   log_path=tmp_path / "ft.csv")
    assert res.best_val < before
    assert evaluate_decoder_loss(dec, val, weights) == pytest.approx(res.best_val, abs=1e-12)
    assert (tmp_path / "ft.csv").read_text().startswith("epoch,train_loss,val_loss")


def test_freezing_contract_and_determinism(rng):
    train, val = toy_split(rng, 30), toy_split(rng, 10)
    states = []
    for _ in range(2):
        dec = make_decoder()
        bank_before = {k: v.copy() for k, v in dec.bank.state_dict().items()}
        finetune(dec, train, val, FinetuneConfig(epochs=2, drop_p=0.2, seed=4))
        assert all(np.array_equal(bank_before[k], v) for k, v in dec.bank.state_dict().items())
        states.append(dec.state_dict())
    assert all(np.array_equal(states[0][k], states[1][k]) for k in states[0])


def test_eval_ignores_drop_p(rng):
    dec = make_decoder()
    tls = toy_split(rng, 5)
    a = [o.per_slot_logits for o in dec.predict(tls)]
    dec.config.dropout = 0.5
    b = [o.per_slot_logits for o in dec.predict(tls)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_trajectory_csv(rng, tmp_path):
    dec = make_decoder()
    tls = [make_timeline(rng, 2, stay="A"), make_timeline(rng, 1, stay="B")]
    write_trajectories_csv(tmp_path / "t.csv", dec.predict(tls))
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "stay_id,slot_index,offset_minutes,prediction"
    assert [l.split(",")[:2] for l in lines[1:]] == [["A", "0"], ["A", "1"], ["B", "0"]]
    write_trajectories_csv(tmp_path / "p.csv", make_decoder("phenotyping").predict(tls[1:]))
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0].endswith(",class_id") and len(lines) == 26
