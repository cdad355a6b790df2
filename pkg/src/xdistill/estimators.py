"""scikit-learn style wrappers around the training loops.

``MLMTeacher`` and ``LightDistiller`` are transformers that map token-id
sequences to CLS vectors; ``PairClassifier`` is a classifier over
(premise, hypothesis) token pairs. They exist so the pipeline composes with
sklearn tooling (``get_params``, ``clone``, ``score``); the CLI and the
experiment harness call the underlying modules directly.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import compute as C
from . import distill as K
from . import model as M
from . import train as T
from .data import NUM_CLASSES, TaskExample, as_sequences, concat_sequences, encode_pairs
from .errors import ConfigError, DataError


def _check_ids(X, vocab_size):
    if isinstance(X, M.SequenceBatch):
        return X
    X = check_array(X, dtype=np.int64, ensure_2d=True)
    if X.min() < 0 or X.max() >= vocab_size:
        raise DataError(f"token ids must lie in [0, {vocab_size})")
    if (X[:, 0] != M.CLS).any():
        raise DataError("every row must start with CLS")
    return as_sequences(X)


def _cls_vectors(model, batch, chunk=512):
    out = []
    with C.no_grad():
        for start in range(0, len(batch), chunk):
            trace = M.forward(model, batch.take(slice(start, start + chunk)))
            out.append(trace.top().data[:, 0, :])
    return np.concatenate(out)


def _encoder(obj):
    if isinstance(obj, M.EncoderModel):
        return obj
    for attr in ("model_", "student_"):
        if hasattr(obj, attr):
            return getattr(obj, attr)
    raise ConfigError("expected an EncoderModel or a fitted MLMTeacher / LightDistiller")


class MLMTeacher(TransformerMixin, BaseEstimator):
    """Masked-language-model pretraining of a teacher encoder.

    ``fit(X)`` takes a padded [n x seq_len] id array (CLS first, PAD=0).
    ``transform(X)`` returns top-layer CLS vectors.
    """

    def __init__(self, num_layers=4, hidden_size=64, num_heads=4, ffn_size=128, vocab_size=256,
                 max_seq_len=16, dropout_rate=0.1, steps=3000, peak_lr=1e-3, warmup_fraction=0.1,
                 batch_size=32, weight_decay=0.01, seed=0):
        self.num_layers = num_layers
        self.hidden_size = hidden_size
        self.num_heads = num_heads
        self.ffn_size = ffn_size
        self.vocab_size = vocab_size
        self.max_seq_len = max_seq_len
        self.dropout_rate = dropout_rate
        self.steps = steps
        self.peak_lr = peak_lr
        self.warmup_fraction = warmup_fraction
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    def _config(self):
        return M.ModelConfig(num_layers=self.num_layers, hidden_size=self.hidden_size, num_heads=self.num_heads,
                             ffn_size=self.ffn_size, vocab_size=self.vocab_size, max_seq_len=self.max_seq_len,
                             dropout_rate=self.dropout_rate)

    def fit(self, X, y=None):
        config = self._config()
        batch = _check_ids(X, config.vocab_size)
        job = T.TrainJob("mlm", batch_size=self.batch_size, seq_len=config.max_seq_len,
                         schedule=T.Schedule(self.peak_lr, int(self.warmup_fraction * self.steps), self.steps),
                         seed=self.seed, weight_decay=self.weight_decay, log_every=0)
        state = T.TrainState(0, T.AdamW([n for n, _ in M.parameter_shapes(config, True)], self.weight_decay),
                             np.random.default_rng([self.seed, 1]))
        self.model_ = T.run_mlm(config, batch, job, state=state)
        self.loss_curve_ = list(state.history)
        self.n_features_out_ = config.hidden_size
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return _cls_vectors(self.model_, _check_ids(X, self.vocab_size))


class LightDistiller(TransformerMixin, BaseEstimator):
    """Teacher-initialized, embedding-frozen layer-wise distillation.

    ``fit(X)`` accepts one id array or a list of per-language id arrays; the
    loop samples a language uniformly per step.
    """

    def __init__(self, teacher=None, student_layers=2, strategy="top", attn_source="scores",
                 freeze="embeddings", init="teacher", steps=1500, peak_lr=1e-3, warmup_fraction=0.1,
                 batch_size=32, weight_decay=0.01, seed=0):
        self.teacher = teacher
        self.student_layers = student_layers
        self.strategy = strategy
        self.attn_source = attn_source
        self.freeze = freeze
        self.init = init
        self.steps = steps
        self.peak_lr = peak_lr
        self.warmup_fraction = warmup_fraction
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y=None):
        teacher = _encoder(self.teacher)
        vocab = teacher.config.vocab_size
        parts = X if isinstance(X, (list, tuple)) else [X]
        corpus = [_check_ids(p, vocab) for p in parts]
        if self.init == "teacher":
            student = K.init_student_from_teacher(teacher, self.student_layers)
        elif self.init == "random":
            from dataclasses import replace

            student = M.init_random(replace(teacher.config, num_layers=self.student_layers), [self.seed, 5])
        else:
            raise ConfigError(f"init must be 'teacher' or 'random', got {self.init!r}")
        plan = K.make_plan(student, teacher, self.strategy, self.attn_source, self.freeze)
        job = T.TrainJob("distill", batch_size=self.batch_size, seq_len=teacher.config.max_seq_len,
                         schedule=T.Schedule(self.peak_lr, int(self.warmup_fraction * self.steps), self.steps),
                         seed=self.seed, plan=plan, weight_decay=self.weight_decay, log_every=0)
        state = T.TrainState(0, T.AdamW(student.names(), self.weight_decay, frozen=plan.frozen),
                             np.random.default_rng([self.seed, 2]))
        cache = T.TeacherCache(teacher, concat_sequences(corpus), [p[1] for p in plan.mapping.pairs])
        self.student_ = T.run_distill(teacher, student, plan, corpus, job, state=state, teacher_cache=cache)
        self.student_.set_trainable(())
        self.plan_ = plan
        self.loss_curve_ = list(state.history)
        self.n_features_out_ = teacher.config.hidden_size
        return self

    def transform(self, X):
        check_is_fitted(self, "student_")
        return _cls_vectors(self.student_, _check_ids(X, self.student_.config.vocab_size))


def _as_examples(X, y=None):
    out = []
    for i, pair in enumerate(X):
        if isinstance(pair, TaskExample):
            out.append(pair if y is None else TaskExample(pair.premise, pair.hypothesis, int(y[i])))
            continue
        try:
            premise, hypothesis = pair
        except (TypeError, ValueError):
            raise DataError(f"sample {i} is not a (premise, hypothesis) pair") from None
        label = 0 if y is None else int(y[i])
        out.append(TaskExample(tuple(int(t) for t in premise), tuple(int(t) for t in hypothesis), label))
    if not out:
        raise DataError("no samples")
    return out


class PairClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tunes an encoder plus a fresh pooler/softmax head on sentence pairs.

    ``X`` is a sequence of (premise_ids, hypothesis_ids) pairs or TaskExamples.
    """

    def __init__(self, encoder=None, epochs=3, peak_lr=1e-3, batch_size=32, weight_decay=0.01,
                 freeze="embeddings", seed=0):
        self.encoder = encoder
        self.epochs = epochs
        self.peak_lr = peak_lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.freeze = freeze
        self.seed = seed

    def fit(self, X, y):
        encoder = _encoder(self.encoder)
        y = np.asarray(y)
        examples = _as_examples(X, y)
        if len(examples) != len(y):
            raise DataError("X and y have different lengths")
        self.classes_ = np.arange(NUM_CLASSES)
        job = T.TrainJob("finetune", batch_size=self.batch_size, seq_len=encoder.config.max_seq_len,
                         schedule=T.Schedule.constant(self.peak_lr, 1), seed=self.seed, freeze=self.freeze,
                         epochs=self.epochs, weight_decay=self.weight_decay, log_every=0, constant_lr=True)
        self.model_ = T.run_finetune(encoder, examples, job, NUM_CLASSES)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        batch, _ = encode_pairs(_as_examples(X), self.model_.config.max_seq_len)
        logits = M.predict_logits(self.model_, batch)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
