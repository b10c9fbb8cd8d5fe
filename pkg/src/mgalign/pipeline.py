"""Pipeline stages over a run directory.

Every stage reads its inputs from files written by earlier stages and writes
only its own outputs, so stages can be rerun independently::

    run/
      config.resolved
      data/         cohort (records.jsonl, labels.csv, modalities.json), split.csv
      checkpoints/  encoder.json, decoder_<init>.json
      metrics/      split, retrieval, silhouette, task, slot, ablation, sweep CSVs
      traces/       embeddings, trajectories, heatmaps, trajectory pairs
      logs/         per-stage training curves
"""

from __future__ import annotations

import csv
import logging
import platform
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from . import synth
from .config import Config
from .contrastive import PretrainConfig, pretrain
from .decoder import (DecoderConfig, DivergenceError, FinetuneConfig, SeqDecoder, finetune,
                      write_trajectories_csv)
from .encoders import EncoderBank, stay_matrix, write_embeddings_csv
from .interp import compare_ablation, sink_score, write_heatmap, write_trajectory_pair
from .latent_eval import embedding_silhouette, retrieval_table, write_retrieval_csv, write_silhouette_csv
from .metrics import per_slot_metrics, task_metrics, write_metrics_csv, write_slot_metrics_csv
from .nn import load_checkpoint, save_checkpoint
from .splitter import read_split_csv, split_report, stratify, write_split_csv
from .timeline import EventTimeline, build_timelines, random_modality_removal

log = logging.getLogger(__name__)

LAYOUT = ("checkpoints", "metrics", "traces", "logs", "data")
ARCHITECTURE = "causal-decoder"
SCRATCH_SEED_OFFSET = 1000


class MissingArtifact(FileNotFoundError):
    """An upstream stage has not been run for this run directory."""


def prepare_run_dir(run: Path, cfg: Config) -> Path:
    run = Path(run)
    for d in LAYOUT:
        (run / d).mkdir(parents=True, exist_ok=True)
    doc = cfg.to_dict()
    doc["versions"] = {"mgalign": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                       "python": platform.python_version()}
    (run / "config.resolved").write_text(yaml.safe_dump(doc, sort_keys=False))
    return run


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `{stage}` first")
    return path


# ---------------------------------------------------------------------------
# loading helpers
# ---------------------------------------------------------------------------

def load_data(run: Path):
    data = Path(run) / "data"
    _need(data / "records.jsonl", "synth")
    cohort = synth.load_cohort(data)
    patient_of = {r.stay_id: r.patient_id for r in cohort.records}
    split = read_split_csv(_need(data / "split.csv", "split"), cohort.modality_names, patient_of)
    return cohort, split


def make_bank(cfg: Config, specs, seed: int) -> EncoderBank:
    return EncoderBank(specs, cfg.encoder.latent_dim, cfg.encoder.hidden, cfg.encoder.dropout, seed=seed)


def decoder_config(cfg: Config) -> DecoderConfig:
    d = cfg.decoder
    return DecoderConfig(d.d_model, d.layers, d.heads, d.ffn_mult, d.dropout, d.task, d.max_len)


def load_encoder(run: Path, cfg: Config, specs) -> tuple[EncoderBank, dict]:
    state, meta = load_checkpoint(_need(Path(run) / "checkpoints" / "encoder.json", "pretrain"))
    bank = make_bank(cfg, specs, cfg.seed)
    bank.load_state_dict(state)
    return bank, meta


def load_decoder(path: Path, cfg: Config, specs, init: str) -> SeqDecoder:
    state, _ = load_checkpoint(_need(path, "finetune"))
    bank = make_bank(cfg, specs, cfg.seed)
    model = SeqDecoder(decoder_config(cfg), bank, seed=cfg.seed)
    model.load_state_dict(state)
    if init == "contrastive":
        bank.freeze()
    return model


def timelines_for(cohort, split, name: str) -> list[EventTimeline]:
    static = [s.name for s in cohort.modalities if s.static]
    return build_timelines(cohort.records, cohort.modality_names, cohort.labels, split.stays(name), static)


def finetune_sets(cfg: Config, cohort, split):
    train = timelines_for(cohort, split, "train")
    rng = np.random.default_rng([cfg.seed, 31])
    labeled = [train[i] for i in rng.permutation(len(train))[:cfg.finetune.n_labeled]]
    val = timelines_for(cohort, split, "val")[:cfg.finetune.n_val]
    return labeled, val


def stressed(cfg: Config, timelines):
    """Evaluation-time removal of one random modality per multimodal stay."""
    rng = np.random.default_rng([cfg.seed, 9])
    return [random_modality_removal(t, rng) for t in timelines]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_synth(cfg: Config, run: Path) -> synth.Cohort:
    cohort = synth.generate(synth.preset(cfg.synth.preset, cfg.synth.n_patients, cfg.seed))
    synth.save_cohort(Path(run) / "data", cohort)
    log.info("synth: %d stays, %d records", len(cohort.labels), len(cohort.records))
    return cohort


def run_split(cfg: Config, run: Path):
    data = Path(run) / "data"
    _need(data / "records.jsonl", "synth")
    cohort = synth.load_cohort(data)
    split = stratify(cohort.records, cfg.seed, cohort.modality_names)
    write_split_csv(data / "split.csv", split)
    rows = split_report(split)
    with open(Path(run) / "metrics" / "split_report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return split


def run_pretrain(cfg: Config, run: Path):
    cohort, split = load_data(run)
    train = stay_matrix(cohort.records, cohort.modalities, split.stays("train"))
    val = stay_matrix(cohort.records, cohort.modalities, split.stays("val"))
    bank = make_bank(cfg, cohort.modalities, cfg.seed)
    p = cfg.pretrain
    pc = PretrainConfig(p.epochs, p.batch_size, p.lr, p.weight_decay, p.drop_p, p.patience, p.tau_init, seed=cfg.seed)
    result = pretrain(bank, train, val, pc, log_path=Path(run) / "logs" / "pretrain.csv")
    save_checkpoint(Path(run) / "checkpoints" / "encoder.json", bank.state_dict(),
                    {"tau": result.temperature.value, "best_epoch": result.best_epoch, "best_val": result.best_val})
    return bank, result


def run_latent_eval(cfg: Config, run: Path) -> dict:
    cohort, split = load_data(run)
    bank, _ = load_encoder(run, cfg, cohort.modalities)
    test = stay_matrix(cohort.records, cohort.modalities, split.stays("test"))
    emb = bank.encode_batch(test)
    ks = cfg.evaluate.ks
    table = retrieval_table(emb, bank.names, ks)
    write_retrieval_csv(Path(run) / "metrics" / "retrieval.csv", table, ks)
    overall, per = embedding_silhouette(emb)
    write_silhouette_csv(Path(run) / "metrics" / "silhouette.csv", overall, per)
    untrained = make_bank(cfg, cohort.modalities, cfg.seed)
    u_overall, u_per = embedding_silhouette(untrained.encode_batch(test))
    write_silhouette_csv(Path(run) / "metrics" / "silhouette_untrained.csv", u_overall, u_per)
    write_embeddings_csv(Path(run) / "traces" / "embeddings_test.csv", emb)
    return {"table": table, "silhouette": overall, "silhouette_untrained": u_overall}


def _finetune_one(cfg: Config, run: Path, cohort, labeled, val, init: str, drop_p: float, tag: str) -> SeqDecoder:
    if init == "contrastive":
        bank, _ = load_encoder(run, cfg, cohort.modalities)
        bank.freeze()
    else:
        bank = make_bank(cfg, cohort.modalities, cfg.seed + SCRATCH_SEED_OFFSET)
    model = SeqDecoder(decoder_config(cfg), bank, seed=cfg.seed)
    f = cfg.finetune
    fc = FinetuneConfig(f.epochs, f.batch_size, f.lr, 0.0, drop_p, f.patience, seed=cfg.seed)
    ckpt = Path(run) / "checkpoints" / f"decoder_{tag}.json"
    try:
        finetune(model, labeled, val, fc, log_path=Path(run) / "logs" / f"finetune_{tag}.csv")
    except DivergenceError as exc:
        save_checkpoint(ckpt.with_suffix(".diverged.json"), exc.state, {"epoch": exc.epoch})
        raise
    save_checkpoint(ckpt, model.state_dict(), {"initialization": init, "drop_p": drop_p})
    return model


def run_finetune(cfg: Config, run: Path) -> dict[str, SeqDecoder]:
    cohort, split = load_data(run)
    labeled, val = finetune_sets(cfg, cohort, split)
    return {init: _finetune_one(cfg, run, cohort, labeled, val, init, cfg.finetune.drop_p, init)
            for init in cfg.finetune.initializations}


def _evaluate(cfg: Config, model: SeqDecoder, test, stress) -> list[tuple[str, float]]:
    rows = list(task_metrics(cfg.decoder.task, model.predict(test), test).items())
    if stress is not None:
        rows += [(f"{k}_stress", v) for k, v in task_metrics(cfg.decoder.task, model.predict(stress), stress).items()]
    return rows


def run_task_eval(cfg: Config, run: Path) -> list[tuple]:
    cohort, split = load_data(run)
    test = timelines_for(cohort, split, "test")
    stress = stressed(cfg, test) if cfg.evaluate.stress else None
    rows = []
    for init in cfg.finetune.initializations:
        model = load_decoder(Path(run) / "checkpoints" / f"decoder_{init}.json", cfg, cohort.modalities, init)
        outputs = model.predict(test)
        for metric, value in task_metrics(cfg.decoder.task, outputs, test).items():
            rows.append((ARCHITECTURE, init, cfg.decoder.task, metric, value))
        if stress is not None:
            for metric, value in task_metrics(cfg.decoder.task, model.predict(stress), stress).items():
                rows.append((ARCHITECTURE, init, cfg.decoder.task, f"{metric}_stress", value))
        write_slot_metrics_csv(Path(run) / "metrics" / f"slot_metrics_{init}.csv",
                               per_slot_metrics(cfg.decoder.task, outputs, test))
        write_trajectories_csv(Path(run) / "traces" / f"trajectories_{init}.csv", outputs)
    write_metrics_csv(Path(run) / "metrics" / "task_metrics.csv", rows)
    return rows


def run_interpret(cfg: Config, run: Path) -> dict[str, float]:
    cohort, split = load_data(run)
    it = cfg.interpret
    if it.modality not in cohort.modality_names:
        raise MissingArtifact(f"interpret.modality {it.modality!r} is not a modality of this cohort")
    test = timelines_for(cohort, split, "test")
    stays = [t for t in test if it.modality in t.modalities and it.sink_modality in t.modalities
             and len(t.modalities) >= 2][:it.n_stays]
    summary = {}
    with open(Path(run) / "metrics" / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["initialization", "stay_id", "removed_modality", "trajectory_divergence", "flip", "sink_score"])
        for init in cfg.finetune.initializations:
            model = load_decoder(Path(run) / "checkpoints" / f"decoder_{init}.json", cfg, cohort.modalities, init)
            scores = []
            for n, t in enumerate(stays):
                rep = compare_ablation(model, t, it.modality)
                score = sink_score(rep, it.sink_modality)
                scores.append(score)
                w.writerow([init, t.stay_id, it.modality, repr(rep.trajectory_divergence), int(rep.flip), repr(score)])
                if n < it.n_exports:
                    base = Path(run) / "traces" / f"{init}_{t.stay_id}"
                    write_heatmap(f"{base}_baseline.csv", rep.baseline)
                    write_heatmap(f"{base}_ablated.csv", rep.ablated)
                    write_trajectory_pair(f"{base}_pair.csv", rep)
            summary[init] = float(np.mean(scores)) if scores else float("nan")
    write_metrics_csv(Path(run) / "metrics" / "sink_summary.csv",
                      [(ARCHITECTURE, init, cfg.decoder.task, f"sink_score_{it.sink_modality}", v)
                       for init, v in summary.items()])
    return summary


def run_sweep(cfg: Config, run: Path) -> list[tuple]:
    """Fine-tune every initialization at each modality-dropout rate of the grid."""
    cohort, split = load_data(run)
    labeled, val = finetune_sets(cfg, cohort, split)
    test = timelines_for(cohort, split, "test")
    stress = stressed(cfg, test) if cfg.evaluate.stress else None
    rows = []
    for p in cfg.sweep.drop_p:
        for init in cfg.finetune.initializations:
            model = _finetune_one(cfg, run, cohort, labeled, val, init, float(p), f"{init}_drop{p:g}")
            for metric, value in _evaluate(cfg, model, test, stress):
                rows.append((repr(float(p)), init, cfg.decoder.task, metric, value))
    with open(Path(run) / "metrics" / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["drop_p", "initialization", "task", "metric", "value"])
        for p, init, task, metric, value in rows:
            w.writerow([p, init, task, metric, repr(float(value))])
    return rows


STAGES = {
    "synth": run_synth,
    "split": run_split,
    "pretrain": run_pretrain,
    "latent-eval": run_latent_eval,
    "finetune": run_finetune,
    "task-eval": run_task_eval,
    "interpret": run_interpret,
    "sweep": run_sweep,
}

PIPELINE = ("synth", "split", "pretrain", "latent-eval", "finetune", "task-eval", "interpret")


def run_all(cfg: Config, run: Path, stages=PIPELINE) -> None:
    run = prepare_run_dir(run, cfg)
    for name in stages:
        STAGES[name](cfg, run)
