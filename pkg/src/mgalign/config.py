"""Experiment configuration: one YAML file with a section per pipeline stage.

Format version 1::

    version: 1
    seed: 0
    synth:     {preset: mimic-like, n_patients: 2000}
    encoder:   {latent_dim: 64, hidden: 128, dropout: 0.3}
    pretrain:  {epochs: 30, batch_size: 128, lr: 0.001, ...}
    decoder:   {d_model: 32, layers: 2, heads: 2, task: mortality, ...}
    finetune:  {epochs: 20, n_labeled: 600, initializations: [contrastive, scratch], ...}
    evaluate:  {stress: true, ks: [1, 5, 10], n_bins: 10}
    interpret: {modality: timeseries, sink_modality: demographics, n_stays: 50}
    sweep:     {drop_p: [0.0, 0.1, 0.2, 0.3, 0.4]}

Missing keys take the defaults below. ``--set section.key=value`` overrides
any leaf; values are parsed as YAML scalars or lists.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import yaml

from .synth import PRESETS

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class SynthSection:
    preset: str = "mimic-like"
    n_patients: int = 2000


@dataclass
class EncoderSection:
    latent_dim: int = 64
    hidden: int = 128
    dropout: float = 0.3


@dataclass
class PretrainSection:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.005
    drop_p: float = 0.15
    patience: int = 10
    tau_init: float = 0.07


@dataclass
class DecoderSection:
    d_model: int = 32
    layers: int = 2
    heads: int = 2
    ffn_mult: int = 4
    dropout: float = 0.1
    task: str = "mortality"
    max_len: int = 128


@dataclass
class FinetuneSection:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    drop_p: float = 0.20
    patience: int = 4
    n_labeled: int = 600
    n_val: int = 400
    initializations: list = field(default_factory=lambda: ["contrastive", "scratch"])


@dataclass
class EvaluateSection:
    stress: bool = True
    ks: list = field(default_factory=lambda: [1, 5, 10])
    n_bins: int = 10


@dataclass
class InterpretSection:
    modality: str = "timeseries"
    sink_modality: str = "demographics"
    n_stays: int = 50
    n_exports: int = 3


@dataclass
class SweepSection:
    drop_p: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4])


@dataclass
class Config:
    version: int = CONFIG_VERSION
    seed: int = 0
    synth: SynthSection = field(default_factory=SynthSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    interpret: InterpretSection = field(default_factory=InterpretSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_SECTIONS = {f.name: f.default_factory for f in fields(Config) if f.default_factory is not dataclasses.MISSING}


def _coerce(path: str, value, default):
    """Check ``value`` against the type of ``default``; ints are accepted for floats."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    return value


def from_dict(doc: dict | None) -> Config:
    doc = dict(doc or {})
    cfg = Config()
    version = doc.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {version!r} (expected {CONFIG_VERSION})")
    if "seed" in doc:
        cfg.seed = _coerce("seed", doc.pop("seed"), 0)
    for name, body in doc.items():
        if name not in _SECTIONS:
            raise ConfigError(f"{name}: unknown section (known: {', '.join(_SECTIONS)})")
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"{name}: expected a mapping")
        section = getattr(cfg, name)
        known = {f.name for f in fields(section)}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"{name}.{key}: unknown field")
            setattr(section, key, _coerce(f"{name}.{key}", value, getattr(section, key)))
    validate(cfg)
    return cfg


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``key.path=value`` strings to a raw config mapping."""
    doc = dict(doc or {})
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{key}: cannot parse value {raw!r}: {exc}") from None
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key}: {p} is not a section")
        node[parts[-1]] = value
    return doc


def load(path=None, overrides=()) -> Config:
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(apply_overrides(doc, overrides))


def _positive(path, v):
    if v <= 0:
        raise ConfigError(f"{path}: must be positive, got {v}")


def _prob(path, v, upper_open=True):
    if not (0.0 <= v < 1.0 if upper_open else 0.0 <= v <= 1.0):
        raise ConfigError(f"{path}: must lie in [0, 1), got {v}")


def validate(cfg: Config) -> None:
    if cfg.synth.preset not in PRESETS:
        raise ConfigError(f"synth.preset: unknown preset {cfg.synth.preset!r} (choose {', '.join(PRESETS)})")
    _positive("synth.n_patients", cfg.synth.n_patients)
    for name in ("latent_dim", "hidden"):
        _positive(f"encoder.{name}", getattr(cfg.encoder, name))
    _prob("encoder.dropout", cfg.encoder.dropout)
    for name in ("epochs", "batch_size", "lr", "patience", "tau_init"):
        _positive(f"pretrain.{name}", getattr(cfg.pretrain, name))
    if cfg.pretrain.weight_decay < 0:
        raise ConfigError("pretrain.weight_decay: must be >= 0")
    _prob("pretrain.drop_p", cfg.pretrain.drop_p)
    for name in ("d_model", "layers", "heads", "ffn_mult", "max_len"):
        _positive(f"decoder.{name}", getattr(cfg.decoder, name))
    if cfg.decoder.d_model % cfg.decoder.heads:
        raise ConfigError(f"decoder.heads: d_model={cfg.decoder.d_model} is not divisible by heads={cfg.decoder.heads}")
    if cfg.decoder.task not in ("mortality", "phenotyping", "los"):
        raise ConfigError(f"decoder.task: must be mortality, phenotyping or los, got {cfg.decoder.task!r}")
    if cfg.decoder.max_len % 2:
        raise ConfigError("decoder.max_len: must be even")
    _prob("decoder.dropout", cfg.decoder.dropout)
    for name in ("epochs", "batch_size", "lr", "patience", "n_labeled", "n_val"):
        _positive(f"finetune.{name}", getattr(cfg.finetune, name))
    _prob("finetune.drop_p", cfg.finetune.drop_p)
    bad = [i for i in cfg.finetune.initializations if i not in ("contrastive", "scratch")]
    if bad or not cfg.finetune.initializations:
        raise ConfigError(f"finetune.initializations: entries must be contrastive or scratch, got {cfg.finetune.initializations}")
    if not cfg.evaluate.ks or any(not isinstance(k, int) or k < 1 for k in cfg.evaluate.ks):
        raise ConfigError(f"evaluate.ks: must be positive integers, got {cfg.evaluate.ks}")
    _positive("evaluate.n_bins", cfg.evaluate.n_bins)
    _positive("interpret.n_stays", cfg.interpret.n_stays)
    for i, p in enumerate(cfg.sweep.drop_p):
        if isinstance(p, bool) or not isinstance(p, (int, float)):
            raise ConfigError(f"sweep.drop_p[{i}]: expected a number, got {p!r}")
        _prob(f"sweep.drop_p[{i}]", p)
