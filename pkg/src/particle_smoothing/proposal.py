"""Proposal distributions ``q(y_t | ...) ∝ exp(g(s_{t-1}, x_t, y_t) + C_t(y_t))``.

Three compatibility functions plug into the same interface:

* :class:`NeuralProposal` -- a right-to-left GRU summary of the future input
  and a feedforward network scoring each candidate next state against it;
* :class:`ExactCompatibility` -- the exact OOHMM value (test oracle);
* :class:`ZeroCompatibility` -- ``C_t = 0``, i.e. particle filtering.

Every proposal exposes ``prepare(x) -> context`` (computed once per input
and shared by all particles), ``initial_compat(ctx, s0)`` and
``compat_values(ctx, t, prev, cand)`` returning an ``(M, |Y|)`` array for
candidate states ``cand`` of shape ``(M, |Y|, D)``.  ``C_T`` is always 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import tensor as T
from .autodiff.nn import Embedding, GRUCell, Linear, Module, glorot_uniform, load_checkpoint, save_checkpoint
from .autodiff.tensor import Parameter
from .oohmm import backward_vectors


class DeadEndError(ValueError):
    """Every candidate tag has zero probability under the model."""


# ---------------------------------------------------------------- encoder

class RightEncoder(Module):
    """Stacked right-to-left GRU over ``x``; the top layer gives ``s̄_t``.

    ``s̄_T`` is a learned constant (one vector per layer); ``s̄_t`` reads
    ``x_{t+1}`` on top of ``s̄_{t+1}``.
    """

    def __init__(self, n_x, d=32, emb=16, layers=2, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.emb_dim, self.n_layers = int(d), int(emb), int(layers)
        self.embed = Embedding(n_x, emb, rng)
        self.cells = [GRUCell(emb if i == 0 else d, d, rng) for i in range(layers)]
        self.terminal = Parameter(rng.uniform(-0.1, 0.1, size=(layers, d)))

    def encode_values(self, x_idx):
        """``(T + 1, d)`` array of top-layer states ``s̄_0 .. s̄_T``."""
        x_idx = np.asarray(x_idx, dtype=np.int64)
        n = len(x_idx)
        out = np.empty((n + 1, self.d))
        hs = [self.terminal.value[i][None, :] for i in range(self.n_layers)]
        out[n] = hs[-1][0]
        for t in range(n - 1, -1, -1):
            inp = self.embed.values(x_idx[t:t + 1])
            for i, cell in enumerate(self.cells):
                hs[i] = cell.values(inp, hs[i])
                inp = hs[i]
            out[t] = hs[-1][0]
        return out

    def encode(self, x_idx):
        """Tape version of :meth:`encode_values` (tensor of shape ``(T + 1, d)``)."""
        x_idx = np.asarray(x_idx, dtype=np.int64)
        n = len(x_idx)
        hs = [T.reshape(self.terminal[i], (1, self.d)) for i in range(self.n_layers)]
        rows = [hs[-1]]
        for t in range(n - 1, -1, -1):
            inp = self.embed(x_idx[t:t + 1])
            for i, cell in enumerate(self.cells):
                hs[i] = cell(inp, hs[i])
                inp = hs[i]
            rows.append(hs[-1])
        return T.concat(rows[::-1], axis=0)


def encode_suffixes(enc, x_idx):
    """List of ``s̄_t`` for ``t = 0 .. T``."""
    return list(enc.encode_values(x_idx))


# ---------------------------------------------------------------- compatibility net

class CompatibilityNet(Module):
    """Feedforward ReLU net on ``[candidate | s_{t-1} | s̄_t]`` giving ``C_t``.

    The first affine layer is stored as three blocks so that the parts
    shared by all candidates (``s_{t-1}``) or all particles (``s̄_t``) are
    multiplied once.
    """

    def __init__(self, state_dim, enc_dim, hidden=32, layers=4, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if layers < 2:
            raise ValueError("compatibility net needs at least 2 layers")
        self.state_dim, self.enc_dim = int(state_dim), int(enc_dim)
        fan_in = 2 * state_dim + enc_dim
        self.Wc = Parameter(glorot_uniform(rng, fan_in, hidden, shape=(state_dim, hidden)))
        self.Wp = Parameter(glorot_uniform(rng, fan_in, hidden, shape=(state_dim, hidden)))
        self.Ws = Parameter(glorot_uniform(rng, fan_in, hidden, shape=(enc_dim, hidden)))
        self.b1 = Parameter(np.zeros(hidden))
        self.rest = [Linear(hidden, hidden if i < layers - 2 else 1, rng) for i in range(layers - 1)]

    def _check(self, prev, cand, sbar):
        if cand.shape[-1] != self.state_dim or prev.shape[-1] != self.state_dim or sbar.shape[-1] != self.enc_dim:
            raise ValueError(
                f"compatibility input sizes {cand.shape[-1]}/{prev.shape[-1]}/{sbar.shape[-1]} "
                f"do not match ({self.state_dim}, {self.state_dim}, {self.enc_dim})")

    def values(self, prev, cand, sbar):
        """``prev (N, D)``, ``cand (N, Y, D)``, ``sbar (N, d)`` -> ``(N, Y)``."""
        self._check(prev, cand, sbar)
        shared = prev @ self.Wp.value + sbar @ self.Ws.value + self.b1.value
        h = cand @ self.Wc.value + shared[:, None, :]
        for layer in self.rest:
            h = layer.values(np.maximum(h, 0.0))
        return h[..., 0]

    def __call__(self, prev, cand, sbar):
        """Tape version; ``sbar`` may be a tensor."""
        self._check(prev, cand, sbar)
        N, Y, D = cand.shape
        shared = T.matmul(prev, self.Wp) + T.matmul(sbar, self.Ws) + self.b1
        h = T.matmul(np.ascontiguousarray(cand.reshape(N * Y, D)), self.Wc)
        h = T.reshape(h, (N, Y, -1)) + T.reshape(shared, (N, 1, -1))
        for layer in self.rest:
            h = layer(T.relu(h))
        return T.reshape(h, (N, Y))


def compatibility(cnet, s_prev, sbar_t, candidates, t=0, T_len=1):
    """``C_t`` for every candidate next state (``0`` when ``t == T``)."""
    candidates = np.asarray(candidates, dtype=np.float64)
    if t == T_len:
        return np.zeros(candidates.shape[0])
    out = cnet.values(np.asarray(s_prev, dtype=np.float64)[None, :], candidates[None, :, :],
                      np.asarray(sbar_t, dtype=np.float64)[None, :])
    return out[0]


class HhatHead(Module):
    """Affine increments ``h(s̄_{t+1}, x_{t+1})`` accumulated right to left."""

    def __init__(self, enc_dim, emb_dim, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.lin = Linear(enc_dim + emb_dim, 1, rng)

    def values(self, sbar, x_emb):
        """``Ĥ_0 .. Ĥ_T`` from ``sbar (T+1, d)`` and input embeddings ``(T, e)``."""
        n = len(x_emb)
        inc = self.lin.values(np.concatenate([sbar[1:], x_emb], axis=1))[:, 0] if n else np.zeros(0)
        out = np.zeros(n + 1)
        out[:n] = np.cumsum(inc[::-1])[::-1]
        return out


# ---------------------------------------------------------------- proposals

@dataclass
class ProposalContext:
    """Per-input quantities shared by all particles."""

    x: np.ndarray
    data: np.ndarray

    @property
    def T(self):
        return len(self.x)


class ZeroCompatibility:
    """``C_t = 0``: the filtering proposal ``q ∝ exp g``."""

    kind = "zero"

    def prepare(self, x_idx):
        return ProposalContext(np.asarray(x_idx, dtype=np.int64), np.zeros(0))

    def initial_compat(self, ctx, s0):
        return 0.0

    def compat_values(self, ctx, t, prev, cand):
        return np.zeros(cand.shape[:2])


class ExactCompatibility:
    """Exact OOHMM compatibility ``log(s_t . norm(beta_t))``.

    The model state is the belief vector, i.e. the normalized forward
    vector, so the candidate states already are ``norm(alpha_t)``.  ``C_T``
    is forced to 0 (the true value ``-log k`` is the same for every
    candidate, so the induced proposal is unchanged).
    """

    kind = "exact"

    def __init__(self, params):
        self.params = params

    def prepare(self, x_idx):
        x_idx = np.asarray(x_idx, dtype=np.int64)
        lb = np.array([b.beta for b in backward_vectors(self.params, x_idx)])
        nb = np.exp(lb - kernels.logsumexp_rows(lb)[:, None])
        return ProposalContext(x_idx, nb)

    def _log_dot(self, states, beta):
        with np.errstate(divide="ignore"):
            return np.log(np.maximum(states @ beta, 0.0))

    def initial_compat(self, ctx, s0):
        if ctx.T == 0:
            return 0.0
        return float(self._log_dot(np.asarray(s0)[None, :], ctx.data[0])[0])

    def compat_values(self, ctx, t, prev, cand):
        if t == ctx.T:
            return np.zeros(cand.shape[:2])
        return self._log_dot(cand, ctx.data[t])


class NeuralProposal(Module):
    """Trainable proposal: right-to-left encoder plus compatibility net."""

    kind = "neural"

    def __init__(self, n_x, state_dim, d=32, emb=16, enc_layers=2, hidden=32, c_layers=4,
                 use_hhat=False, seed=0):
        rng = np.random.default_rng(seed)
        self.config = {"n_x": int(n_x), "state_dim": int(state_dim), "d": int(d), "emb": int(emb),
                       "enc_layers": int(enc_layers), "hidden": int(hidden), "c_layers": int(c_layers),
                       "use_hhat": bool(use_hhat), "seed": int(seed)}
        self.encoder = RightEncoder(n_x, d, emb, enc_layers, rng)
        self.cnet = CompatibilityNet(state_dim, d, hidden, c_layers, rng)
        self.hhat = HhatHead(d, emb, rng) if use_hhat else None

    def trainable(self):
        """Parameters that affect ``q`` (the Ĥ head does not)."""
        return self.encoder.parameters() + self.cnet.parameters()

    def prepare(self, x_idx):
        x_idx = np.asarray(x_idx, dtype=np.int64)
        return ProposalContext(x_idx, self.encoder.encode_values(x_idx))

    def initial_compat(self, ctx, s0):
        if ctx.T == 0:
            return 0.0
        s0 = np.asarray(s0, dtype=np.float64)[None, :]
        return float(self.cnet.values(s0, s0[:, None, :], ctx.data[0][None, :])[0, 0])

    def compat_values(self, ctx, t, prev, cand):
        if t == ctx.T:
            return np.zeros(cand.shape[:2])
        sbar = np.broadcast_to(ctx.data[t], (prev.shape[0], ctx.data.shape[1]))
        return self.cnet.values(prev, cand, sbar)

    def h_hat(self, ctx):
        """Diagnostic ``Ĥ_0 .. Ĥ_T`` (requires ``use_hhat``)."""
        if self.hhat is None:
            raise ValueError("proposal was built without an Ĥ head")
        return self.hhat.values(ctx.data, self.encoder.embed.values(ctx.x))

    def save(self, path, extra=None):
        return save_checkpoint(path, self.state_dict(), "proposal:neural", self.config, extra)

    @classmethod
    def load(cls, path):
        manifest, arrays = load_checkpoint(path)
        if manifest["kind"] != "proposal:neural":
            raise ValueError(f"checkpoint kind {manifest['kind']!r} is not a neural proposal")
        p = cls(**manifest["hyperparams"])
        p.load_state_dict(arrays)
        return p


def proposal_logits(model, proposal, ctx, t, states):
    """Candidates, local scores, compatibilities and ``log q`` for step ``t``.

    Returns ``(cand (M, Y, D), g (M, Y), C (M, Y), logq (M, Y))``.  Rows in
    which every candidate is impossible get ``logq = -inf`` throughout.
    """
    cand, g = model.expand(states, int(ctx.x[t - 1]))
    C = proposal.compat_values(ctx, t, states, cand)
    logits = np.where(np.isfinite(g), g + C, -np.inf)
    lse = kernels.logsumexp_rows(logits)
    with np.errstate(invalid="ignore"):
        logq = np.where(np.isfinite(lse)[:, None], logits - lse[:, None], -np.inf)
    return cand, g, C, logq


def propose(model, proposal, state, x_idx, t, ctx=None):
    """``q(y_t | s_{t-1}, x)`` as a probability vector over the tag alphabet."""
    ctx = ctx if ctx is not None else proposal.prepare(x_idx)
    state = np.asarray(getattr(state, "value", state), dtype=np.float64)[None, :]
    _, _, _, logq = proposal_logits(model, proposal, ctx, t, state)
    if not np.isfinite(logq[0]).any():
        raise DeadEndError(f"no tag is possible at step {t}")
    return np.exp(logq[0])


def load_proposal(path):
    return NeuralProposal.load(path)
