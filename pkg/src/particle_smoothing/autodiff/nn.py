"""Neural building blocks, the Adam optimizer, and checkpoint files.

Modules hold :class:`Parameter` leaves and offer two paths: differentiable
methods that build tape operations, and ``*_values`` methods that work on
plain arrays for fast sampling when no gradient is needed.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import kernels
from . import tensor as T
from .tensor import Parameter

CHECKPOINT_FORMAT = "particle-smoothing-checkpoint/1"


def glorot_uniform(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def orthogonal(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


class Module:
    """Container of named parameters and child modules."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}.{i}."))
                    elif isinstance(item, Parameter):
                        out[f"{prefix}{key}.{i}"] = item
        for name, p in out.items():
            p.name = name
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def state_dict(self):
        return {k: p.value.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.value.shape}")
            p.value = v.copy()


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        self.W = Parameter(glorot_uniform(rng, n_in, n_out))
        self.b = Parameter(np.zeros(n_out))

    def __call__(self, x):
        return T.matmul(x, self.W) + self.b

    def values(self, x):
        return x @ self.W.value + self.b.value


class MLP(Module):
    """Affine layers with ReLU between them; the last layer is affine only."""

    def __init__(self, sizes, rng):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x

    def values(self, x):
        for i, layer in enumerate(self.layers):
            x = layer.values(x)
            if i < len(self.layers) - 1:
                x = np.maximum(x, 0.0)
        return x


def mlp_apply(layers, x):
    """Apply an :class:`MLP` (differentiable when ``x`` or weights are on a tape)."""
    return layers(x)


class Embedding(Module):
    def __init__(self, n, dim, rng):
        self.table = Parameter(glorot_uniform(rng, n, dim))

    def __call__(self, idx):
        return T.take_rows(self.table, idx)

    def values(self, idx):
        return self.table.value[np.asarray(idx, dtype=np.int64)]


class GRUCell(Module):
    """Single GRU layer; recurrent gate blocks are initialized orthogonal."""

    def __init__(self, n_in, d, rng):
        self.n_in, self.d = n_in, d
        self.W = Parameter(glorot_uniform(rng, n_in, d, shape=(n_in, 3 * d)))
        self.U = Parameter(np.concatenate([orthogonal(rng, d) for _ in range(3)], axis=1))
        self.b = Parameter(np.zeros(3 * d))

    def __call__(self, x, h):
        return T.gru_cell(x, h, self.W, self.U, self.b)

    def values(self, x, h):
        return kernels.gru_forward(x, h, self.W.value, self.U.value, self.b.value)[0]


def gru_step(cell, h, x):
    """One GRU update ``h' = cell(x, h)``; accepts a single vector or a row batch."""
    hv, xv = T.as_tensor(h), T.as_tensor(x)
    single = hv.ndim == 1
    if single:
        hv, xv = T.reshape(hv, (1, -1)), T.reshape(xv, (1, -1))
    if hv.shape[1] != cell.d or xv.shape[1] != cell.n_in:
        raise ValueError(f"shape mismatch: h{hv.shape} x{xv.shape} for GRU({cell.n_in}->{cell.d})")
    out = cell(xv, hv)
    return T.reshape(out, (-1,)) if single else out


class Adam:
    """Adam with bias correction and an L2 penalty folded into the gradient."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, l2=1e-5):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.l2 = lr, betas, eps, l2
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def update(self, grads):
        """Apply one step; ``grads`` maps parameter -> gradient array."""
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.value)
            g = g + self.l2 * p.value
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_update(state, params, grads):
    """Functional spelling of :meth:`Adam.update` (``params`` must match ``state``)."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("parameter list does not match optimizer state")
    state.update(grads)
    return params


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, arrays, kind, hyperparams=None, extra=None):
    """Write ``path.json`` (manifest) and ``path.bin`` (little-endian float64).

    ``arrays`` maps names to arrays; order is preserved in the manifest.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype="<f8")
            fh.write(a.tobytes(order="C"))
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "hyperparams": hyperparams or {},
        "extra": extra or {},
        "arrays": entries,
        "data_file": path.with_suffix(".bin").name,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".json")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(manifest, arrays)``."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {path}")
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    arrays = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return manifest, arrays
