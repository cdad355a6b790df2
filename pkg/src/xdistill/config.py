"""Run configuration: a schema-versioned JSON document.

Every section is a frozen dataclass. Loading rejects unknown keys at any
depth, and ``resolved`` returns the full tree with defaults filled in, which
is what gets written next to outputs.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .model import ATTN_SOURCES, ModelConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    num_concepts: int = 40
    anchor_fraction: float = 0.3
    num_languages: int = 6
    sentence_length: tuple = (3, 7)
    successors: int = 3
    smoothing: float = 0.05
    corpus_sentences: int = 2000
    pair_rate: float = 0.5
    premise_length: tuple = (3, 6)
    hypothesis_length: tuple = (2, 4)
    neutral_overlap: float = 0.3
    train_examples: int = 3000
    dev_examples: int = 300
    test_examples: int = 1000

    def validate(self):
        if self.num_languages < 2:
            raise ConfigError("need at least two languages (one to fine-tune, one to transfer to)")
        if not 0.0 <= self.anchor_fraction <= 1.0:
            raise ConfigError("anchor_fraction must lie in [0, 1]")
        if not 0.0 <= self.pair_rate <= 1.0:
            raise ConfigError("pair_rate must lie in [0, 1]")
        for name in ("corpus_sentences", "train_examples", "test_examples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be positive")
        if self.dev_examples < 0:
            raise ConfigError("data.dev_examples must be >= 0")


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.1
    batch_size: int = 32
    weight_decay: float = 0.01
    mask_rate: float = 0.15

    def validate(self):
        _check_schedule("pretrain", self)
        if not 0.0 < self.mask_rate <= 1.0:
            raise ConfigError("pretrain.mask_rate must lie in (0, 1]")


@dataclass(frozen=True)
class DistillConfig:
    init: str = "teacher"
    student_layers: int = 2
    strategy: str = "top"
    attn_source: str = "scores"
    freeze: str = "embeddings"
    loss_weights: tuple = (1.0, 1.0)
    steps: int = 1500
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.1
    batch_size: int = 32
    weight_decay: float = 0.01

    def validate(self):
        _check_schedule("distill", self)
        _one_of("distill.init", self.init, ("teacher", "random"))
        _one_of("distill.strategy", self.strategy, ("top", "uniform"))
        _one_of("distill.attn_source", self.attn_source, ATTN_SOURCES)
        _one_of("distill.freeze", self.freeze, ("embeddings", "none"))
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0:
            raise ConfigError("distill.loss_weights must be two non-negative numbers")
        if self.student_layers < 1:
            raise ConfigError("distill.student_layers must be positive")


@dataclass(frozen=True)
class FinetuneConfig:
    peak_lr: float = 1e-3
    epochs: int = 3
    batch_size: int = 32
    weight_decay: float = 0.01
    freeze: str = "embeddings"
    repeats: int = 3

    def validate(self):
        if self.peak_lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.repeats < 1:
            raise ConfigError("finetune needs positive peak_lr, epochs, batch_size and repeats")
        _one_of("finetune.freeze", self.freeze, ("embeddings", "none"))


ARM_NAMES = ("teacher", "light", "drop", "uniform", "random_init", "no_freeze")


@dataclass(frozen=True)
class AblateConfig:
    arms: tuple = ARM_NAMES
    curve_arms: tuple = ("light", "random_init")
    eval_every: int = 750

    def validate(self):
        for a in (*self.arms, *self.curve_arms):
            _one_of("ablate arm", a, ARM_NAMES)
        if self.eval_every < 1:
            raise ConfigError("ablate.eval_every must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    seeds: tuple = (0, 1, 2)
    log_every: int = 10

    def __post_init__(self):
        for section in (self.data, self.pretrain, self.distill, self.finetune, self.ablate):
            section.validate()
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.distill.student_layers > self.model.num_layers:
            raise ConfigError(
                f"student_layers {self.distill.student_layers} exceeds teacher depth {self.model.num_layers}"
            )
        if self.data.sentence_length[1] + 2 > self.model.max_seq_len:
            raise ConfigError("sentences do not fit max_seq_len")

    def with_seeds(self, seeds):
        return replace(self, seeds=tuple(int(s) for s in seeds))

    def resolved(self):
        """Plain nested dict with every default filled in."""
        return {"schema_version": SCHEMA_VERSION, **_to_plain(self)}

    def dumps(self):
        return json.dumps(self.resolved(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        doc = dict(doc)
        version = doc.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        return _build(cls, doc, "")


def load_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then dotted ``overrides``."""
    doc = {}
    if path is not None:
        try:
            with open(path) as f:
                doc = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    for key, value in (overrides or {}).items():
        _set_dotted(doc, key, value)
    return RunConfig.from_dict(doc)


def write_resolved(config, directory, name="config.json"):
    import os

    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, name)
    with open(path, "w") as f:
        f.write(config.dumps())
    return path


def flatten(tree, prefix=""):
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_diff(a, b):
    """Dotted keys whose resolved values differ between two configs."""
    fa, fb = flatten(a.resolved()), flatten(b.resolved())
    return sorted(k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k))


# ------------------------------------------------------------------ helpers


def _check_schedule(section, cfg):
    if cfg.steps < 1 or cfg.batch_size < 1:
        raise ConfigError(f"{section}.steps and {section}.batch_size must be positive")
    if cfg.peak_lr <= 0:
        raise ConfigError(f"{section}.peak_lr must be positive")
    if not 0.0 <= cfg.warmup_fraction <= 1.0:
        raise ConfigError(f"{section}.warmup_fraction must lie in [0, 1]")


def _one_of(name, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {list(allowed)}, got {value!r}")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, doc, where):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{name} must be an object")
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}{name} must be a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _coerce(value, default, where + name)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {where.rstrip('.') or 'config'}: {e}") from None


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def _set_dotted(doc, key, value):
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {key}: {p} is not a section")
    node[parts[-1]] = value
