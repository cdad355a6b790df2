"""Top-layer transformer distillation: losses, layer mappings, student init, freezing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import compute as C
from .errors import ConfigError, InvariantError
from .model import ATTN_SOURCES, EMBEDDING_PARAMS, truncate

STRATEGIES = ("top", "uniform")
FREEZE_POLICIES = ("embeddings", "none")


@dataclass(frozen=True)
class LayerMapping:
    """Ordered (student_layer, teacher_layer) pairs, both 1-indexed."""

    pairs: tuple

    def __post_init__(self):
        pairs = tuple((int(s), int(t)) for s, t in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        if not pairs:
            raise ConfigError("layer mapping is empty")
        students = [s for s, _ in pairs]
        teachers = [t for _, t in pairs]
        if min(students) < 1 or min(teachers) < 1:
            raise ConfigError("layer indices are 1-based")
        if any(b <= a for a, b in zip(students, students[1:])):
            raise ConfigError("student layers must be strictly increasing")
        if any(b <= a for a, b in zip(teachers, teachers[1:])):
            raise ConfigError("teacher layers must be strictly increasing")

    def validate(self, student_layers, teacher_layers):
        for s, t in self.pairs:
            if s > student_layers or t > teacher_layers:
                raise ConfigError(
                    f"pair ({s}, {t}) exceeds depths ({student_layers}, {teacher_layers})"
                )

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True)
class DistillPlan:
    mapping: LayerMapping
    attn_source: str = "scores"
    frozen: frozenset = field(default_factory=frozenset)
    loss_weights: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.attn_source not in ATTN_SOURCES:
            raise ConfigError(f"attn_source must be one of {ATTN_SOURCES}")
        object.__setattr__(self, "frozen", frozenset(self.frozen))
        _check_weights(self.loss_weights)

    def validate(self, student, teacher):
        self.mapping.validate(student.config.num_layers, teacher.config.num_layers)
        missing = self.frozen - set(student.params)
        if missing:
            raise ConfigError(f"frozen names not in student: {sorted(missing)}")
        check_compatible(student.config, teacher.config)


def _check_weights(weights):
    if len(weights) != 2 or any(w < 0 for w in weights):
        raise ConfigError(f"loss weights must be two non-negative numbers, got {weights!r}")


def check_compatible(student_config, teacher_config):
    if student_config.hidden_size != teacher_config.hidden_size:
        raise ConfigError(
            f"hidden size {student_config.hidden_size} != {teacher_config.hidden_size}; "
            "projections between widths are out of scope"
        )
    if student_config.num_heads != teacher_config.num_heads:
        raise ConfigError(
            f"head count {student_config.num_heads} != {teacher_config.num_heads}"
        )


# -------------------------------------------------------------------- losses


def _valid(mask):
    return np.asarray(mask, dtype=np.float64)


def attention_loss(attn_s, attn_t, mask):
    """Mean over heads of the per-head MSE between attention matrices.

    Only real (non-padded) query rows and key columns enter the mean. Every
    head sees the same selection, so the head average equals one weighted
    mean over [b x h x n x n].
    """
    if attn_s.ndim != 4 or attn_t.ndim != 4:
        raise ConfigError("attention tensors must be [b x h x n x n]")
    if attn_s.shape[1] != attn_t.shape[1]:
        raise ConfigError(f"head count mismatch: {attn_s.shape[1]} vs {attn_t.shape[1]}")
    m = _valid(mask)
    weight = (m[:, :, None] * m[:, None, :])[:, None, :, :]
    return C.weighted_mse(attn_s, attn_t, weight)


def hidden_loss(h_s, h_t, mask):
    """MSE between hidden states over real positions and all features."""
    if h_s.shape[-1] != h_t.shape[-1]:
        raise ConfigError(
            f"hidden size mismatch {h_s.shape[-1]} vs {h_t.shape[-1]}; "
            "projections between widths are out of scope"
        )
    return C.weighted_mse(h_s, h_t, _valid(mask)[:, :, None])


def layer_loss(attn_pair, hidden_pair, mask, weights=(1.0, 1.0)):
    _check_weights(weights)
    w_attn, w_hidn = weights
    la = attention_loss(attn_pair[0], attn_pair[1], mask)
    lh = hidden_loss(hidden_pair[0], hidden_pair[1], mask)
    return C.add(C.scale(la, w_attn), C.scale(lh, w_hidn))


def build_mapping(strategy, student_layers, teacher_layers):
    if not 1 <= student_layers <= teacher_layers:
        raise ConfigError(f"need 1 <= student depth <= teacher depth, got {student_layers}, {teacher_layers}")
    if strategy == "top":
        return LayerMapping(((student_layers, teacher_layers),))
    if strategy == "uniform":
        if teacher_layers % student_layers:
            raise ConfigError(
                f"uniform mapping needs teacher depth {teacher_layers} divisible by {student_layers}"
            )
        step = teacher_layers // student_layers
        return LayerMapping(tuple((i, i * step) for i in range(1, student_layers + 1)))
    raise ConfigError(f"unknown mapping strategy {strategy!r}; expected one of {STRATEGIES}")


def total_distill_loss(trace_s, trace_t, plan):
    """Sum of per-pair layer losses over the plan's mapping."""
    total = None
    for s, t in plan.mapping:
        if s > trace_s.num_layers or t > trace_t.num_layers:
            raise InvariantError(f"mapped pair ({s}, {t}) exceeds trace depths")
        term = layer_loss(
            (trace_s.attn(s, plan.attn_source), trace_t.attn(t, plan.attn_source)),
            (trace_s.hidden[s - 1], trace_t.hidden[t - 1]),
            trace_s.mask,
            plan.loss_weights,
        )
        total = term if total is None else C.add(total, term)
    return total


# ----------------------------------------------------------- initialization


def init_student_from_teacher(teacher, student_layers):
    """Embeddings plus the bottom ``student_layers`` layers, deep-copied."""
    return truncate(teacher, student_layers)


def frozen_parameter_set(model, policy):
    if policy == "none":
        return frozenset()
    if policy == "embeddings":
        return frozenset(name for name in EMBEDDING_PARAMS if name in model.params)
    raise ConfigError(f"unknown freeze policy {policy!r}; expected one of {FREEZE_POLICIES}")


def make_plan(student, teacher, strategy="top", attn_source="scores", freeze="embeddings",
              loss_weights=(1.0, 1.0)):
    plan = DistillPlan(
        build_mapping(strategy, student.config.num_layers, teacher.config.num_layers),
        attn_source,
        frozen_parameter_set(student, freeze),
        tuple(loss_weights),
    )
    plan.validate(student, teacher)
    return plan
