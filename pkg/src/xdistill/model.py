"""BERT-style post-norm transformer encoder that records per-layer traces."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import compute as C
from .compute import Tensor
from .errors import ConfigError, ShapeError, TokenIndexError

PAD, CLS, SEP, MASK = 0, 1, 2, 3
SPECIAL_IDS = (PAD, CLS, SEP, MASK)
ATTN_SOURCES = ("scores", "probs")

EMBEDDING_PARAMS = (
    "embeddings.word",
    "embeddings.position",
    "embeddings.type",
    "embeddings.norm.gain",
    "embeddings.norm.bias",
)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_size: int = 64
    num_heads: int = 4
    ffn_size: int = 128
    vocab_size: int = 256
    max_seq_len: int = 16
    type_vocab: int = 2
    dropout_rate: float = 0.1
    attn_source: str = "scores"
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "num_heads", "ffn_size",
                     "vocab_size", "max_seq_len", "type_vocab"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.attn_source not in ATTN_SOURCES:
            raise ConfigError(f"attn_source must be one of {ATTN_SOURCES}")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")

    @property
    def head_size(self):
        return self.hidden_size // self.num_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SequenceBatch:
    token_ids: np.ndarray
    type_ids: np.ndarray
    attention_mask: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.type_ids = np.asarray(self.type_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=np.int64)
        if self.token_ids.ndim != 2:
            raise ShapeError(f"token_ids must be [b x n], got {self.token_ids.shape}")
        if not (self.token_ids.shape == self.type_ids.shape == self.attention_mask.shape):
            raise ShapeError("token_ids, type_ids and attention_mask shapes differ")
        if (self.token_ids[:, 0] != CLS).any():
            raise ShapeError("every sequence must start with CLS")
        m = self.attention_mask
        if ((m != 0) & (m != 1)).any() or (np.diff(m, axis=1) > 0).any():
            raise ShapeError("attention_mask must be 0/1 with padding only as a suffix")

    @classmethod
    def from_token_ids(cls, token_ids, type_ids=None):
        token_ids = np.asarray(token_ids, dtype=np.int64)
        # length = index of the last non-PAD token + 1
        lengths = token_ids.shape[1] - np.argmax(np.flip(token_ids != PAD, axis=1), axis=1)
        mask = (np.arange(token_ids.shape[1])[None, :] < lengths[:, None]).astype(np.int64)
        if type_ids is None:
            # segment B starts after the first SEP
            after_sep = np.cumsum(token_ids == SEP, axis=1) - (token_ids == SEP)
            type_ids = ((after_sep > 0) & (mask == 1)).astype(np.int64)
        return cls(token_ids, type_ids, mask)

    @property
    def shape(self):
        return self.token_ids.shape

    def take(self, rows):
        return SequenceBatch(self.token_ids[rows], self.type_ids[rows], self.attention_mask[rows])

    def __len__(self):
        return self.token_ids.shape[0]


@dataclass
class ForwardTrace:
    """Per-layer hidden states and attention matrices of one forward pass.

    ``hidden[l - 1]``, ``scores[l - 1]`` and ``probs[l - 1]`` belong to layer
    ``l`` (1-indexed); ``embedding`` is the layer-0 output.
    """

    embedding: Tensor
    hidden: list
    scores: list
    probs: list
    mask: np.ndarray
    attn_source: str = "scores"

    @property
    def num_layers(self):
        return len(self.hidden)

    def attn(self, layer, source=None):
        source = source or self.attn_source
        if source not in ATTN_SOURCES:
            raise ConfigError(f"attn_source must be one of {ATTN_SOURCES}")
        return (self.scores if source == "scores" else self.probs)[layer - 1]

    @property
    def attention(self):
        return [self.attn(i + 1) for i in range(self.num_layers)]

    def top(self):
        return self.hidden[-1]


@dataclass
class EncoderModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    num_classes: int = 0

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    @property
    def has_classifier(self):
        return "classifier.out.weight" in self.params

    @property
    def has_mlm_head(self):
        return "mlm.bias" in self.params

    def layer(self, index):
        """Parameters of layer ``index`` (0-based) keyed by their short name."""
        prefix = f"layers.{index}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def copy(self):
        return EncoderModel(self.config, {k: Tensor(v.data, v.requires_grad) for k, v in self.params.items()},
                            self.num_classes)

    def set_trainable(self, frozen=()):
        frozen = set(frozen)
        for name, t in self.params.items():
            t.requires_grad = name not in frozen
            t.grad = None

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self):
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_arrays(cls, config, arrays, num_classes=0):
        """Rebuild a model from named arrays, checking names and shapes."""
        mlm = "mlm.bias" in arrays
        expected = dict(parameter_shapes(config, mlm_head=mlm, num_classes=num_classes))
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            unknown = sorted(set(arrays) - set(expected))
            raise ShapeError(f"parameter names do not match config: missing {missing}, unexpected {unknown}")
        params = {}
        for name in arrays:
            shape = expected[name]
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ShapeError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")
            params[name] = Tensor(arr.copy())
        return cls(config, params, num_classes)

    def num_parameters(self):
        return sum(v.size for v in self.params.values())


# ------------------------------------------------------------ construction


def _trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _layer_shapes(cfg):
    d, f = cfg.hidden_size, cfg.ffn_size
    return [
        ("attn.query.weight", (d, d)), ("attn.query.bias", (d,)),
        ("attn.key.weight", (d, d)), ("attn.key.bias", (d,)),
        ("attn.value.weight", (d, d)), ("attn.value.bias", (d,)),
        ("attn.output.weight", (d, d)), ("attn.output.bias", (d,)),
        ("attn.norm.gain", (d,)), ("attn.norm.bias", (d,)),
        ("ffn.in.weight", (d, f)), ("ffn.in.bias", (f,)),
        ("ffn.out.weight", (f, d)), ("ffn.out.bias", (d,)),
        ("ffn.norm.gain", (d,)), ("ffn.norm.bias", (d,)),
    ]


def _init_param(rng, name, shape):
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    return _trunc_normal(rng, shape)


def parameter_shapes(config, mlm_head=False, num_classes=0):
    """Ordered (name, shape) list fully determined by the config."""
    d = config.hidden_size
    shapes = [
        ("embeddings.word", (config.vocab_size, d)),
        ("embeddings.position", (config.max_seq_len, d)),
        ("embeddings.type", (config.type_vocab, d)),
        ("embeddings.norm.gain", (d,)),
        ("embeddings.norm.bias", (d,)),
    ]
    for i in range(config.num_layers):
        shapes += [(f"layers.{i}.{n}", s) for n, s in _layer_shapes(config)]
    if mlm_head:
        shapes += [("mlm.transform.weight", (d, d)), ("mlm.transform.bias", (d,)),
                   ("mlm.norm.gain", (d,)), ("mlm.norm.bias", (d,)),
                   ("mlm.bias", (config.vocab_size,))]
    if num_classes:
        shapes += _classifier_shapes(config, num_classes)
    return shapes


def _classifier_shapes(config, num_classes):
    d = config.hidden_size
    return [("classifier.pooler.weight", (d, d)), ("classifier.pooler.bias", (d,)),
            ("classifier.out.weight", (d, num_classes)), ("classifier.out.bias", (num_classes,))]


def init_random(config, seed, mlm_head=False, num_classes=0):
    """Weights ~ N(0, 0.02^2) truncated at 2 sigma; biases 0; norm gains 1."""
    rng = np.random.default_rng(seed)
    params = {name: Tensor(_init_param(rng, name, shape), requires_grad=True)
              for name, shape in parameter_shapes(config, mlm_head, num_classes)}
    return EncoderModel(config, params, num_classes)


def attach_classifier(model, num_classes, seed):
    """Fresh randomly initialized classifier head; any MLM or classifier head is dropped."""
    rng = np.random.default_rng(seed)
    params = {k: v for k, v in model.params.items() if not k.startswith(("classifier.", "mlm."))}
    for name, shape in _classifier_shapes(model.config, num_classes):
        params[name] = Tensor(_init_param(rng, name, shape), requires_grad=True)
    return EncoderModel(model.config, params, num_classes)


def truncate(teacher, k):
    """Bottom-``k``-layer copy of ``teacher`` without any task head."""
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ConfigError(f"truncation depth must be a positive int, got {k!r}")
    if k > teacher.config.num_layers:
        raise ConfigError(f"cannot keep {k} layers of a {teacher.config.num_layers}-layer model")
    config = replace(teacher.config, num_layers=k)
    params = {}
    for name, shape in parameter_shapes(config):
        params[name] = Tensor(teacher.params[name].data, requires_grad=True)
    return EncoderModel(config, params, 0)


# ----------------------------------------------------------------- forward


def _check_batch(config, batch):
    n = batch.token_ids.shape[1]
    if n > config.max_seq_len:
        raise TokenIndexError(f"position {n - 1} outside [0, {config.max_seq_len})")
    bad = (batch.type_ids < 0) | (batch.type_ids >= config.type_vocab)
    if bad.any():
        raise TokenIndexError(f"type id {int(batch.type_ids[bad][0])} outside [0, {config.type_vocab})")


def embed(model, batch, training=False, rng=None):
    """Token + position + type embeddings, then layer norm and dropout."""
    cfg = model.config
    _check_batch(cfg, batch)
    p = model.params
    n = batch.token_ids.shape[1]
    x = C.embedding_lookup(p["embeddings.word"], batch.token_ids)
    x = C.add(x, C.embedding_lookup(p["embeddings.position"], np.arange(n)))
    x = C.add(x, C.embedding_lookup(p["embeddings.type"], batch.type_ids))
    x = C.layer_norm(x, p["embeddings.norm.gain"], p["embeddings.norm.bias"], cfg.layer_norm_eps)
    return C.dropout(x, cfg.dropout_rate, rng, training)


def mask_bias(attention_mask):
    """Additive key mask of shape [b x 1 x 1 x n]."""
    m = np.asarray(attention_mask, dtype=np.float64)
    return ((1.0 - m) * C.MASK_BIAS)[:, None, None, :]


def encoder_layer(h_in, layer, mask, config, training=False, rng=None):
    """One post-norm encoder block.

    Returns (h_out, scores, probs); scores are the scaled pre-softmax logits
    with the mask bias added, probs their row softmax. Both are [b x h x n x n].
    """
    if h_in.ndim != 3 or h_in.shape[-1] != config.hidden_size:
        raise ShapeError(f"encoder_layer expects [b x n x {config.hidden_size}], got {h_in.shape}")
    b, n, d = h_in.shape
    h, dk = config.num_heads, config.head_size
    rate = config.dropout_rate

    def heads(name):
        t = C.linear(h_in, layer[f"attn.{name}.weight"], layer[f"attn.{name}.bias"])
        return C.transpose(C.reshape(t, (b, n, h, dk)), (0, 2, 1, 3))

    q, k, v = heads("query"), heads("key"), heads("value")
    scores = C.scale(C.matmul(q, C.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    scores = C.add(scores, Tensor(mask_bias(mask)))
    probs = C.softmax_rows(scores)
    ctx = C.matmul(probs, v)
    ctx = C.reshape(C.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    attn_out = C.linear(ctx, layer["attn.output.weight"], layer["attn.output.bias"])
    attn_out = C.dropout(attn_out, rate, rng, training)
    x = C.layer_norm(C.add(h_in, attn_out), layer["attn.norm.gain"], layer["attn.norm.bias"],
                     config.layer_norm_eps)
    ff = C.gelu(C.linear(x, layer["ffn.in.weight"], layer["ffn.in.bias"]))
    ff = C.linear(ff, layer["ffn.out.weight"], layer["ffn.out.bias"])
    ff = C.dropout(ff, rate, rng, training)
    out = C.layer_norm(C.add(x, ff), layer["ffn.norm.gain"], layer["ffn.norm.bias"],
                       config.layer_norm_eps)
    return out, scores, probs


def forward(model, batch, training=False, rng=None):
    cfg = model.config
    if training and cfg.dropout_rate > 0 and rng is None:
        raise ConfigError("training-mode forward needs a seeded generator for dropout")
    h = embed(model, batch, training, rng)
    trace = ForwardTrace(h, [], [], [], batch.attention_mask, cfg.attn_source)
    for i in range(cfg.num_layers):
        h, scores, probs = encoder_layer(h, model.layer(i), batch.attention_mask, cfg, training, rng)
        trace.hidden.append(h)
        trace.scores.append(scores)
        trace.probs.append(probs)
    return trace


def classify(model, trace):
    """Tanh pooler on the CLS position of the top layer, then an affine map."""
    if not model.has_classifier:
        raise ConfigError("model has no classifier head")
    p = model.params
    cls = C.select(trace.top(), (slice(None), 0))
    pooled = C.tanh(C.linear(cls, p["classifier.pooler.weight"], p["classifier.pooler.bias"]))
    return C.linear(pooled, p["classifier.out.weight"], p["classifier.out.bias"])


def mlm_logits(model, trace, positions):
    """Vocabulary logits at flat positions (row-major over [b x n]).

    The decoder matrix is tied to the word embedding table.
    """
    if not model.has_mlm_head:
        raise ConfigError("model has no MLM head")
    p = model.params
    top = trace.top()
    b, n, d = top.shape
    rows = C.take_rows(C.reshape(top, (b * n, d)), positions)
    x = C.gelu(C.linear(rows, p["mlm.transform.weight"], p["mlm.transform.bias"]))
    x = C.layer_norm(x, p["mlm.norm.gain"], p["mlm.norm.bias"], model.config.layer_norm_eps)
    logits = C.matmul(x, C.transpose(p["embeddings.word"], (1, 0)))
    return C.add(logits, p["mlm.bias"])


def predict_logits(model, batch):
    """Inference-mode class logits as a plain array."""
    with C.no_grad():
        return classify(model, forward(model, batch, training=False)).data

