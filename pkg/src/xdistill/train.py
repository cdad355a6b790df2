"""Optimizer, learning-rate schedule and the three training loops."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import compute as C
from .data import NUM_CLASSES, as_sequences, build_batches, concat_sequences
from .distill import DistillPlan, frozen_parameter_set, total_distill_loss
from .errors import ConfigError, DataError, StateError
from .model import (
    MASK,
    SPECIAL_IDS,
    SequenceBatch,
    attach_classifier,
    classify,
    forward,
    init_random,
    mlm_logits,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to ``peak_lr`` then linear decay to 0 at ``total_steps``."""

    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")

    @classmethod
    def constant(cls, lr, total_steps):
        return cls(lr, 0, total_steps)


def lr_at(schedule, step):
    if not 0 <= step <= schedule.total_steps:
        raise ConfigError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    if schedule.total_steps == schedule.warmup_steps:
        return schedule.peak_lr
    return schedule.peak_lr * (schedule.total_steps - step) / (schedule.total_steps - schedule.warmup_steps)


def constant_lr(schedule, step):
    return schedule.peak_lr


def decays(name):
    """BERT no-decay rule: biases and layer-norm parameters are not decayed."""
    return not (name.endswith(".bias") or name.endswith(".gain"))


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Frozen parameters get no moment buffers and are never touched.
    """

    def __init__(self, names, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8, frozen=()):
        self.frozen = frozenset(frozen)
        self.names = [n for n in names if n not in self.frozen]
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params, lr):
        """Update ``params`` (name -> Tensor) in place from their ``.grad``."""
        for name in self.names:
            if params[name].grad is None:
                raise StateError(f"no gradient for trainable parameter {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name in self.names:
            p = params[name]
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and decays(name):
                update = update + self.weight_decay * p.data
            if lr:
                p.data = p.data - lr * update

    def state_dict(self):
        return {"step_count": self.step_count, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.step_count = int(state["step_count"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


def adamw_step(model, optimizer, lr):
    """One optimizer step on ``model``; frozen parameters stay bit-identical."""
    optimizer.step(model.params, lr)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# -------------------------------------------------------------------- masking


def mlm_mask(batch, rng, mask_rate=0.15, vocab_size=None, ignore_index=C.IGNORE_INDEX):
    """BERT 80/10/10 masking. Returns (masked batch, labels)."""
    ids = batch.token_ids
    labels = np.full(ids.shape, ignore_index, dtype=np.int64)
    maskable = (batch.attention_mask == 1) & ~np.isin(ids, SPECIAL_IDS)
    chosen = maskable & (rng.random(ids.shape) < mask_rate)
    if mask_rate == 0 or not chosen.any():
        return batch, labels
    if vocab_size is None:
        raise ConfigError("vocab_size is required for random replacement")
    labels[chosen] = ids[chosen]
    roll = rng.random(ids.shape)
    randoms = rng.integers(len(SPECIAL_IDS), vocab_size, size=ids.shape)
    new = ids.copy()
    new[chosen & (roll < 0.8)] = MASK
    swap = chosen & (roll >= 0.8) & (roll < 0.9)
    new[swap] = randoms[swap]
    return SequenceBatch(new, batch.type_ids, batch.attention_mask), labels


# -------------------------------------------------------------------- loops


@dataclass
class TrainJob:
    kind: str
    batch_size: int = 32
    seq_len: int = 16
    schedule: Schedule = field(default_factory=lambda: Schedule(1e-4, 0, 100))
    seed: int = 0
    freeze: str = "none"
    plan: DistillPlan | None = None
    epochs: int = 1
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    mask_rate: float = 0.15
    log_every: int = 10
    constant_lr: bool = False

    def __post_init__(self):
        if self.kind not in ("mlm", "distill", "finetune"):
            raise ConfigError(f"unknown job kind {self.kind!r}")
        if self.kind == "distill" and self.plan is None:
            raise ConfigError("a distill job needs a DistillPlan")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    def lr(self, step):
        return self.schedule.peak_lr if self.constant_lr else lr_at(self.schedule, step)


@dataclass
class TrainState:
    """Everything needed to continue a loop bit-for-bit."""

    step: int
    optimizer: AdamW
    rng: np.random.Generator
    history: list = field(default_factory=list)


class StepLog:
    """Append-only CSV of (step, lr, loss, extra columns)."""

    def __init__(self, path=None, extra=()):
        self.path = path
        self.fields = ["step", "lr", "loss", *extra]
        self.rows = []
        if path is not None and not _exists(path):
            with open(path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(self.fields)

    def append(self, **row):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow([_fmt(row.get(k, "")) for k in self.fields])


def _exists(path):
    import os

    return os.path.exists(path)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _train_step(model, optimizer, loss, lr, clip):
    C.backward(loss)
    clip_grad_norm([model.params[n] for n in optimizer.names], clip)
    adamw_step(model, optimizer, lr)
    model.zero_grad()


def run_mlm(config, corpus, job, state=None, step_log=None, model=None, stop_at=None):
    """Pretrain a teacher from scratch with masked language modeling.

    Pass ``model`` and ``state`` together to continue an interrupted run.
    """
    if len(corpus) == 0:
        raise DataError("empty pretraining corpus")
    corpus = as_sequences(corpus)
    if model is None:
        model = init_random(config, job.seed, mlm_head=True)
    if state is None:
        state = TrainState(0, AdamW(model.names(), job.weight_decay), np.random.default_rng([job.seed, 1]))
    total = job.schedule.total_steps
    while state.step < total:
        if stop_at is not None and state.step >= stop_at:
            break
        batch = corpus.take(state.rng.integers(0, len(corpus), size=job.batch_size))
        masked, labels = mlm_mask(batch, state.rng, job.mask_rate, config.vocab_size)
        flat = labels.reshape(-1)
        positions = np.nonzero(flat != C.IGNORE_INDEX)[0]
        if len(positions) == 0:
            state.step += 1
            continue
        trace = forward(model, masked, training=True, rng=state.rng)
        loss = C.cross_entropy(mlm_logits(model, trace, positions), flat[positions])
        lr = job.lr(state.step)
        value = loss.item()
        _train_step(model, state.optimizer, loss, lr, job.clip_norm)
        _record(state, step_log, job, lr, value)
        state.step += 1
    return model


def _record(state, step_log, job, lr, value):
    state.history.append(value)
    if job.log_every and (state.step % job.log_every == 0 or state.step == job.schedule.total_steps - 1):
        if step_log is not None:
            step_log.append(step=state.step, lr=lr, loss=value)
        log.debug("step %d lr %.3g loss %.5f", state.step, lr, value)


class TeacherCache:
    """Teacher traces for a fixed corpus, computed once in inference mode.

    Only the layers a mapping needs are kept. Batches index the cache by
    corpus row, so every distillation arm can reuse one teacher pass.
    """

    def __init__(self, teacher, corpus, layers, batch_size=256):
        self.layers = sorted(set(layers))
        corpus = as_sequences(corpus)
        n = len(corpus)
        self.hidden = {}
        self.scores = {}
        self.probs = {}
        chunks = {l: ([], [], []) for l in self.layers}
        with C.no_grad():
            for start in range(0, n, batch_size):
                trace = forward(teacher, corpus.take(slice(start, start + batch_size)))
                for l in self.layers:
                    chunks[l][0].append(trace.hidden[l - 1].data)
                    chunks[l][1].append(trace.scores[l - 1].data)
                    chunks[l][2].append(trace.probs[l - 1].data)
        for l in self.layers:
            self.hidden[l] = np.concatenate(chunks[l][0])
            self.scores[l] = np.concatenate(chunks[l][1])
            self.probs[l] = np.concatenate(chunks[l][2])
        self.num_layers = teacher.config.num_layers

    def trace(self, rows, mask):
        from .model import ForwardTrace

        hidden, scores, probs = [], [], []
        for l in range(1, self.num_layers + 1):
            if l in self.hidden:
                hidden.append(C.Tensor(self.hidden[l][rows]))
                scores.append(C.Tensor(self.scores[l][rows]))
                probs.append(C.Tensor(self.probs[l][rows]))
            else:
                hidden.append(None)
                scores.append(None)
                probs.append(None)
        return ForwardTrace(None, hidden, scores, probs, mask)


def run_distill(teacher, student, plan, corpus, job, state=None, step_log=None,
                teacher_cache=None, hook=None, stop_at=None):
    """Train ``student`` to match ``teacher`` traces under ``plan``.

    ``corpus`` is a list of per-language padded id arrays; each step draws
    a language uniformly, then a batch from it. ``hook(step, student)`` runs
    before each step and once at the end; ``stop_at`` interrupts early
    (used to exercise resume).
    """
    plan.validate(student, teacher)
    if not corpus or any(len(c) == 0 for c in corpus):
        raise DataError("every distillation language needs sentences")
    corpus = [as_sequences(c) for c in corpus]
    offsets = np.cumsum([0] + [len(c) for c in corpus])
    flat = concat_sequences(corpus)
    student.set_trainable(plan.frozen)
    if state is None:
        state = TrainState(0, AdamW(student.names(), job.weight_decay, frozen=plan.frozen),
                           np.random.default_rng([job.seed, 2]))
    total = job.schedule.total_steps
    while state.step < total:
        if stop_at is not None and state.step >= stop_at:
            return student
        if hook is not None:
            hook(state.step, student)
        lang = int(state.rng.integers(len(corpus)))
        rows = offsets[lang] + state.rng.integers(0, len(corpus[lang]), size=job.batch_size)
        batch = flat.take(rows)
        if teacher_cache is not None:
            t_trace = teacher_cache.trace(rows, batch.attention_mask)
        else:
            with C.no_grad():
                t_trace = forward(teacher, batch, training=False)
        s_trace = forward(student, batch, training=True, rng=state.rng)
        loss = total_distill_loss(s_trace, t_trace, plan)
        lr = job.lr(state.step)
        value = loss.item()
        _train_step(student, state.optimizer, loss, lr, job.clip_norm)
        _record(state, step_log, job, lr, value)
        state.step += 1
    if hook is not None:
        hook(state.step, student)
    return student


def finetune_start(model, job, num_classes=NUM_CLASSES):
    """Fresh classifier on a copy of ``model`` plus its optimizer state."""
    model = attach_classifier(model.copy(), num_classes, [job.seed, 3])
    frozen = frozen_parameter_set(model, job.freeze)
    model.set_trainable(frozen)
    state = TrainState(0, AdamW(model.names(), job.weight_decay, frozen=frozen),
                       np.random.default_rng([job.seed, 4]))
    return model, state


def run_finetune(model, task_train, job, num_classes=NUM_CLASSES, step_log=None, state=None, stop_at=None):
    """Attach a fresh classifier head and train it (and the encoder) on pairs.

    Embeddings stay frozen when ``job.freeze == "embeddings"``. To resume,
    pass the partially trained classifier model together with its ``state``.
    """
    labels = np.array([ex.label for ex in task_train])
    if ((labels < 0) | (labels >= num_classes)).any():
        raise DataError(f"label outside [0, {num_classes})")
    if state is None:
        model, state = finetune_start(model, job, num_classes)
    else:
        model.set_trainable(state.optimizer.frozen)
    for step, (batch, y) in enumerate(build_batches(task_train, job.batch_size, job.seed, job.epochs,
                                                     job.seq_len)):
        if step < state.step:
            continue
        if stop_at is not None and step >= stop_at:
            return model
        trace = forward(model, batch, training=True, rng=state.rng)
        loss = C.cross_entropy(classify(model, trace), y)
        lr = job.lr(min(step, job.schedule.total_steps))
        value = loss.item()
        _train_step(model, state.optimizer, loss, lr, job.clip_norm)
        state.history.append(value)
        if step_log is not None and job.log_every and step % job.log_every == 0:
            step_log.append(step=step, lr=lr, loss=value)
        state.step = step + 1
    model.set_trainable(())
    return model


def finetune_steps(num_examples, batch_size, epochs):
    return epochs * math.ceil(num_examples / batch_size)
