"""Tape-based reverse-mode differentiation over numpy arrays.

Operations on :class:`Tensor` values are recorded on the active
:class:`Tape` (one per thread) only when at least one input requires a
gradient.  Outside a tape, the same calls just compute values, so model
code can be shared between training and inference.

Gradients never live on the tensors themselves: :meth:`Tape.backward`
returns them in a dict, which keeps shared parameters safe to read from
several tapes at once.
"""
from __future__ import annotations

import os
import threading

import numpy as np

from .. import kernels

DEBUG_FINITE = os.environ.get("PARTICLE_SMOOTHING_DEBUG_FINITE", "") not in ("", "0")

_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "grad")
    # make ndarray <op> Tensor dispatch to the Tensor reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Parameter(Tensor):
    """A trainable leaf tensor with a stable name."""

    __slots__ = ("name",)

    def __init__(self, value, name=""):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tape:
    """Records differentiable operations in creation (topological) order."""

    def __init__(self):
        self.nodes = []
        self.params = {}

    def __enter__(self):
        self._prev = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def _record(self, node):
        self.nodes.append(node)
        for p in node.parents:
            if isinstance(p, Parameter):
                self.params.setdefault(id(p), p)

    def backward(self, loss, params=None):
        """Gradients of scalar ``loss`` with respect to ``params``.

        ``params`` defaults to every parameter touched on this tape.  The
        result maps each parameter to an array of its shape; parameters
        unreachable from ``loss`` get zeros.
        """
        if not isinstance(loss, Tensor) or loss.value.size != 1:
            raise ValueError("backward requires a scalar loss tensor")
        if params is None:
            params = list(self.params.values())
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for p in params:
            g = grads.get(id(p))
            out[p] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64).reshape(p.value.shape)
        return out


def backward(tape, loss, params=None):
    return tape.backward(loss, params)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents, backward_fn, allow_neg_inf=False):
    if DEBUG_FINITE:
        v = np.asarray(value)
        bad = np.isnan(v) | (v == np.inf)
        if not allow_neg_inf:
            bad |= v == -np.inf
        assert not bad.any(), "non-finite value produced on tape"
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value)
    node = Tensor(value, parents, backward_fn, requires_grad=True)
    tape._record(node)
    return node


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def exp(a):
    a = as_tensor(a)
    v = np.exp(a.value)
    return _result(v, (a,), lambda g: (g * v,))


def log(a):
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        v = np.log(a.value)
    return _result(v, (a,), lambda g: (g / a.value,))


def tanh(a):
    a = as_tensor(a)
    v = np.tanh(a.value)
    return _result(v, (a,), lambda g: (g * (1.0 - v * v),))


def sigmoid(a):
    a = as_tensor(a)
    v = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _result(v, (a,), lambda g: (g * v * (1.0 - v),))


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0
    return _result(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def square(a):
    a = as_tensor(a)
    return _result(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


# ---------------------------------------------------------------- structural

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        av, bv = a.value, b.value
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            if bv.ndim != 2:
                raise ValueError("vector @ batched matrix is not supported")
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            lead = tuple(range(g.ndim))
            return g[..., None] * bv, np.tensordot(g, av, axes=(lead, lead))
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _result(a.value @ b.value, (a, b), bw)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    return _result(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.value[idx], (a,), bw)


def take_rows(a, indices):
    """Embedding lookup: rows of a 2-D tensor selected by an integer array."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, indices, g)
        return (out,)

    return _result(a.value[indices], (a,), bw)


def pick(a, indices):
    """Select ``a[..., indices[...]]`` along the last axis."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    v = np.take_along_axis(a.value, indices[..., None], axis=-1)[..., 0]

    def bw(g):
        out = np.zeros_like(a.value)
        np.put_along_axis(out, indices[..., None], g[..., None], axis=-1)
        return (out,)

    return _result(v, (a,), bw, allow_neg_inf=True)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    values = [t.value for t in tensors]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate(values, axis=axis), tuple(tensors), bw)


# ---------------------------------------------------------------- log-domain

def _lse(v, axis):
    m = np.max(v, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(v - safe).sum(axis=axis, keepdims=True)) + safe
    return out


def logsumexp(a, axis=-1):
    a = as_tensor(a)
    out = _lse(a.value, axis)

    def bw(g):
        with np.errstate(invalid="ignore"):
            w = np.exp(a.value - out)
        w = np.nan_to_num(w)
        return (np.expand_dims(g, axis) * w,)

    return _result(np.squeeze(out, axis=axis), (a,), bw, allow_neg_inf=True)


def log_softmax(a, axis=-1, mask=None):
    """Log-softmax along ``axis``.

    Entries where ``mask`` is False are excluded from the support: they get
    ``-inf`` output and zero gradient.
    """
    a = as_tensor(a)
    v = a.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        v = np.where(mask, v, -np.inf)
    lse = _lse(v, axis)
    out = v - lse
    with np.errstate(invalid="ignore"):
        p = np.exp(out)
    p = np.nan_to_num(p)

    def bw(g):
        gm = g if mask is None else np.where(mask, g, 0.0)
        return (gm - p * gm.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw, allow_neg_inf=True)


# ---------------------------------------------------------------- fused GRU

def gru_cell(x, h, W, U, b):
    """Fused GRU step (gate order update, reset, candidate).

    ``h' = z * h + (1 - z) * n`` with ``n = tanh(x Wn + r * (h Un) + bn)``.
    Inputs are 2-D row batches.
    """
    x, h, W, U, b = (as_tensor(t) for t in (x, h, W, U, b))
    if x.ndim != 2 or h.ndim != 2 or x.shape[0] != h.shape[0]:
        raise ValueError(f"gru_cell expects row batches, got x{x.shape} h{h.shape}")
    d = h.shape[1]
    if W.shape != (x.shape[1], 3 * d) or U.shape != (d, 3 * d) or b.shape != (3 * d,):
        raise ValueError("gru_cell weight shapes do not match input/hidden sizes")
    h_new, z, r, n, hn = kernels.gru_forward(x.value, h.value, W.value, U.value, b.value)

    def bw(g):
        dx, dh, dW, dU, db = kernels.gru_backward(
            np.ascontiguousarray(g), x.value, h.value, W.value, U.value, z, r, n, hn)
        return dx, dh, dW, dU, db

    return _result(h_new, (x, h, W, U, b), bw)
