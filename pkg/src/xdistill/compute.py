"""Reverse-mode differentiable tensors on top of numpy (float64).

Every differentiable function in this module builds one node of a dynamic
graph. Nodes carry a monotonically increasing sequence number, so replaying
them in descending order is exactly the reverse of execution order.
"""
from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DegenerateRowError,
    ShapeError,
    StateError,
    TokenIndexError,
)

DTYPE = np.float64
IGNORE_INDEX = -100
MASK_BIAS = -1e9

_sequence = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run the enclosed block without recording graph nodes."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """Dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_released")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._seq = next(_sequence)
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Row-major flat copy of the contents."""
        return self.data.ravel().tolist()

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __neg__ = lambda self: scale(self, -1.0)  # noqa: E731

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_sequence)
    out._released = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t, g):
    # never in place: upstream buffers may be shared between parents
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    The graph is released afterwards; calling this again on the same loss
    raises StateError.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise StateError("backward() already ran on this graph; rebuild the forward pass")
    if not loss.requires_grad:
        raise StateError("loss does not depend on any tensor with requires_grad")

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._seq, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for node in nodes:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in nodes:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node.grad = None
            node._released = True
    loss._released = True


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), _bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), _bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), _bw)


def scale(a, c):
    c = float(c)

    def _bw(g):
        _accumulate(a, g * c)

    return _node(a.data * c, (a,), _bw)


def tanh(x):
    y = np.tanh(x.data)

    def _bw(g):
        _accumulate(x, g * (1.0 - y * y))

    return _node(y, (x,), _bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh approximation of x * Phi(x)."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v * v * v))
    y = 0.5 * v * (1.0 + t)

    def _bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * v * dt))

    return _node(y, (x,), _bw)


def dropout(x, rate, rng=None, training=True):
    """Inverted dropout; identity when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def _bw(g):
        _accumulate(x, g * keep)

    return _node(x.data * keep, (x,), _bw)


# ------------------------------------------------------------------ structure


def reshape(x, shape):
    def _bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), _bw)


def transpose(x, axes):
    inverse = np.argsort(axes)

    def _bw(g):
        _accumulate(x, g.transpose(inverse))

    return _node(x.data.transpose(axes), (x,), _bw)


def select(x, key):
    """Basic (slice/int) indexing, e.g. ``select(h, (slice(None), 0))``."""

    def _bw(g):
        full = np.zeros_like(x.data)
        full[key] = g
        _accumulate(x, full)

    return _node(x.data[key].copy(), (x,), _bw)


def take_rows(x, rows):
    """Gather rows of a 2-D tensor (duplicates allowed)."""
    rows = np.asarray(rows, dtype=np.intp)

    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        _accumulate(x, full)

    return _node(x.data[rows], (x,), _bw)


def sum_all(x):
    def _bw(g):
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _node(np.array(x.data.sum()), (x,), _bw)


def mean_all(x):
    return scale(sum_all(x), 1.0 / x.size)


# ----------------------------------------------------------------- linear alg


def matmul(a, b):
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), _bw)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` applied over the last axis of x."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            _accumulate(weight, x2.T @ g2)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))

    return _node(out.reshape(lead + (weight.shape[1],)), parents, _bw)


# -------------------------------------------------------------- normalizers


def softmax_rows(x):
    """Softmax over the last axis with per-row max subtraction."""
    v = x.data
    if np.isneginf(v).all(axis=-1).any():
        raise DegenerateRowError("softmax row with every entry at -inf")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (x,), _bw)


def layer_norm(x, gain, bias, eps=1e-12):
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    n = v.shape[-1]

    def _bw(g):
        if x.requires_grad:
            gx = g * gain.data
            gx = inv / n * (
                n * gx
                - gx.sum(axis=-1, keepdims=True)
                - xhat * (gx * xhat).sum(axis=-1, keepdims=True)
            )
            _accumulate(x, gx)
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, n).sum(axis=0))

    return _node(xhat * gain.data + bias.data, (x, gain, bias), _bw)


# ------------------------------------------------------------------- lookups


def embedding_lookup(table, ids):
    """Gather rows of ``table``; the backward pass scatter-adds."""
    ids = np.asarray(ids, dtype=np.intp)
    vocab = table.shape[0]
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        raise TokenIndexError(f"token id {int(ids[bad][0])} outside [0, {vocab})")

    def _bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.ravel(), g.reshape(-1, table.shape[1]))
        _accumulate(table, full)

    return _node(table.data[ids], (table,), _bw)


# -------------------------------------------------------------------- losses


def weighted_mse(x, y, weight=None):
    """Mean of (x - y)^2 over the elements selected by a 0/1 (or real) weight.

    ``weight`` is a constant array broadcastable to x; None means all
    elements. The normalizer is the total weight.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"mse shape mismatch: {x.shape} vs {y.shape}")
    diff = x.data - y.data
    if weight is None:
        w = None
        denom = float(diff.size)
        total = float((diff * diff).sum())
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=DTYPE), diff.shape)
        denom = float(w.sum())
        if denom <= 0:
            raise DataError("mse over an empty selection")
        total = float((w * diff * diff).sum())

    def _bw(g):
        grad = (2.0 / denom) * diff * g
        if w is not None:
            grad = grad * w
        _accumulate(x, grad)
        _accumulate(y, -grad)

    return _node(np.array(total / denom), (x, y), _bw)


def mse(x, y):
    return weighted_mse(x, y)


def cross_entropy(logits, labels, ignore_index=IGNORE_INDEX):
    """Mean negative log-softmax of the true class; ignored rows excluded."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [b x C] logits and b labels, got {logits.shape}, {labels.shape}")
    n_classes = logits.shape[1]
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise DataError("cross_entropy over an empty batch (all rows ignored)")
    if ((labels[valid] < 0) | (labels[valid] >= n_classes)).any():
        raise DataError(f"label outside [0, {n_classes})")
    v = logits.data
    shifted = v - v.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, labels[rows]].sum() / count

    def _bw(g):
        grad = np.exp(logp)
        grad[rows, labels[rows]] -= 1.0
        grad[~valid] = 0.0
        _accumulate(logits, grad * (g / count))

    return _node(np.array(loss), (logits,), _bw)
