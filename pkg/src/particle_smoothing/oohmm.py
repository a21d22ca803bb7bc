"""Output-output HMMs with exact inference.

An OOHMM has latent states ``u_t`` with transitions ``p(u | u')`` and emits
an aligned pair ``(x_t, y_t)`` from each state.  Conditioning on ``x`` gives
a globally normalized tagger whose logprob-to-go can be computed exactly,
which makes these models the ground truth for every approximate sampler in
the package.

Sequences passed to the functions below are index arrays over the
parameter alphabets; use :meth:`OohmmParams.encode_x` / ``encode_y`` for
symbols.  All forward/backward arithmetic is in the log domain.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .scoring import (
    ENUMERATION_LIMIT,
    Alphabet,
    EnumerationTooLargeError,
    ScoringModel,
    all_paths,
)

STOCHASTIC_TOL = 1e-12


class ImpossiblePrefixError(ValueError):
    """The observed pair has zero probability under every reachable state."""

    log_score = -np.inf


@dataclass(eq=False)
class OohmmParams:
    trans: np.ndarray
    emit: np.ndarray
    bos_index: int = 0
    x_alphabet: Alphabet = None
    y_alphabet: Alphabet = None
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.trans = np.array(self.trans, dtype=np.float64)
        self.emit = np.array(self.emit, dtype=np.float64)
        k = self.trans.shape[0]
        if self.trans.shape != (k, k) or self.emit.ndim != 3 or self.emit.shape[0] != k:
            raise ValueError("trans must be k x k and emit k x |X| x |Y|")
        if (self.trans < 0).any() or (self.emit < 0).any():
            raise ValueError("probabilities must be nonnegative")
        if np.abs(self.trans.sum(axis=1) - 1.0).max() > STOCHASTIC_TOL:
            raise ValueError("transition rows must sum to 1")
        if np.abs(self.emit.sum(axis=(1, 2)) - 1.0).max() > STOCHASTIC_TOL:
            raise ValueError("emission distributions must sum to 1")
        if not 0 <= self.bos_index < k:
            raise ValueError("bos_index out of range")
        if self.x_alphabet is None:
            self.x_alphabet = Alphabet(str(i) for i in range(self.emit.shape[1]))
        if self.y_alphabet is None:
            self.y_alphabet = Alphabet(str(i) for i in range(self.emit.shape[2]))
        if len(self.x_alphabet) != self.emit.shape[1] or len(self.y_alphabet) != self.emit.shape[2]:
            raise ValueError("alphabet sizes do not match emission table")

    @property
    def k(self):
        return self.trans.shape[0]

    def _cached(self, key, fn):
        if key not in self._cache:
            with np.errstate(divide="ignore"):
                self._cache[key] = fn()
        return self._cache[key]

    @property
    def log_trans(self):
        return self._cached("log_trans", lambda: np.log(self.trans))

    @property
    def log_emit(self):
        return self._cached("log_emit", lambda: np.log(self.emit))

    @property
    def xmarg(self):
        """``p(x | u)``: emissions summed over tags, shape (k, |X|)."""
        return self._cached("xmarg", lambda: self.emit.sum(axis=2))

    @property
    def log_xmarg(self):
        return self._cached("log_xmarg", lambda: np.log(self.xmarg))

    def encode_x(self, seq):
        return self.x_alphabet.encode(seq)

    def encode_y(self, seq):
        return self.y_alphabet.encode(seq)

    # construction helpers

    @classmethod
    def random(cls, rng, k, n_x, n_y, concentration=1.0, bos_index=0):
        trans = rng.dirichlet(np.full(k, concentration), size=k)
        emit = rng.dirichlet(np.full(n_x * n_y, concentration), size=k).reshape(k, n_x, n_y)
        # renormalize so rows sum to 1 within the validation tolerance
        trans /= trans.sum(axis=1, keepdims=True)
        emit /= emit.sum(axis=(1, 2), keepdims=True)
        return cls(trans, emit, bos_index)

    @classmethod
    def from_hmm(cls, init, trans, emit_x, x_alphabet=None, y_alphabet=None):
        """Embed a first-order HMM (state = tag) as an OOHMM.

        State 0 is BOS; state ``1 + y`` means "current tag is y" and emits
        ``(x, y)`` with probability ``emit_x[y, x]``.
        """
        init = np.asarray(init, dtype=np.float64)
        trans = np.asarray(trans, dtype=np.float64)
        emit_x = np.asarray(emit_x, dtype=np.float64)
        n_y, n_x = emit_x.shape
        k = n_y + 1
        T = np.zeros((k, k))
        T[0, 1:] = init
        T[1:, 1:] = trans
        E = np.zeros((k, n_x, n_y))
        E[0] = 1.0 / (n_x * n_y)
        for y in range(n_y):
            E[1 + y, :, y] = emit_x[y]
        return cls(T, E, 0, x_alphabet, y_alphabet)

    # JSON files

    def to_json(self):
        emit = []
        for u in range(self.k):
            entries = []
            for xi, yi in zip(*np.nonzero(self.emit[u])):
                entries.append([self.x_alphabet[xi], self.y_alphabet[yi], float(self.emit[u, xi, yi])])
            emit.append(entries)
        return {
            "k": self.k,
            "trans": [float(v) for v in self.trans.reshape(-1)],
            "emit": emit,
            "bos_index": int(self.bos_index),
            "x_alphabet": list(self.x_alphabet),
            "y_alphabet": list(self.y_alphabet),
        }

    @classmethod
    def from_json(cls, doc):
        k = int(doc["k"])
        trans = np.asarray(doc["trans"], dtype=np.float64).reshape(k, k)
        emit_doc = doc["emit"]
        if isinstance(emit_doc, dict):
            emit_doc = [emit_doc[str(u)] for u in range(k)]
        xs = doc.get("x_alphabet") or sorted({str(e[0]) for st in emit_doc for e in st})
        ys = doc.get("y_alphabet") or sorted({str(e[1]) for st in emit_doc for e in st})
        xa, ya = Alphabet(xs), Alphabet(ys)
        emit = np.zeros((k, len(xa), len(ya)))
        for u, entries in enumerate(emit_doc):
            for x, y, p in entries:
                emit[u, xa.index(str(x)), ya.index(str(y))] += float(p)
        return cls(trans, emit, int(doc.get("bos_index", 0)), xa, ya)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- vectors

@dataclass(frozen=True, eq=False)
class ForwardVector:
    """Log forward probabilities ``log alpha_t`` over latent states."""

    alpha: np.ndarray
    t: int

    @property
    def G(self):
        """Log prefix probability ``G_t``."""
        return float(kernels.logsumexp_rows(self.alpha[None, :])[0])


@dataclass(frozen=True, eq=False)
class BackwardVector:
    """Log backward probabilities ``log beta_t``."""

    beta: np.ndarray
    t: int

    @property
    def H_hat(self):
        return float(kernels.logsumexp_rows(self.beta[None, :])[0])


@dataclass(frozen=True, eq=False)
class BeliefState:
    """Posterior over latent states given the observed prefix pair."""

    dist: np.ndarray


def initial_forward(params):
    alpha = np.full(params.k, -np.inf)
    alpha[params.bos_index] = 0.0
    return ForwardVector(alpha, 0)


def initial_belief(params):
    dist = np.zeros(params.k)
    dist[params.bos_index] = 1.0
    return BeliefState(dist)


def forward_step(params, alpha, x_t, y_t):
    """``alpha_t[u] = sum_u' alpha_{t-1}[u'] p(u|u') p(x_t, y_t|u)`` in log space."""
    prev = alpha.alpha[:, None] + params.log_trans
    new = kernels.logsumexp_rows(prev.T) + params.log_emit[:, x_t, y_t]
    return ForwardVector(new, alpha.t + 1)


def forward_vectors(params, x, y):
    """``[alpha_0, ..., alpha_T]`` for a full pair."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    la = kernels.oohmm_forward(params.log_trans, params.log_emit[:, x, y].T, params.bos_index)
    return [ForwardVector(la[t], t) for t in range(len(la))]


def belief_update(params, s, x_t, y_t):
    """Normalized vector-matrix update of a belief state.

    Returns ``(new_belief, local_score)`` with ``local_score = log(s^T P 1)``.
    """
    v = (s.dist @ params.trans) * params.emit[:, x_t, y_t]
    total = v.sum()
    if total <= 0.0:
        raise ImpossiblePrefixError(f"pair ({x_t}, {y_t}) impossible from this belief state")
    return BeliefState(v / total), float(np.log(total))


def backward_vectors(params, x):
    """``[beta_0, ..., beta_T]`` (log domain) summing over all tag suffixes."""
    x = np.asarray(x, dtype=np.int64)
    lb = kernels.oohmm_backward(params.log_trans, params.log_xmarg[:, x].T)
    return [BackwardVector(lb[t], t) for t in range(len(lb))]


def hmm_backward(trans, emit_x, x):
    """Backward recurrence of a plain HMM over tags (probability domain).

    ``beta_T = 1``; ``beta_t[y] = sum_y' p(y'|y) p(x_{t+1}|y') beta_{t+1}[y']``.
    """
    trans = np.asarray(trans, dtype=np.float64)
    emit_x = np.asarray(emit_x, dtype=np.float64)
    T = len(x)
    out = np.ones((T + 1, trans.shape[0]))
    for t in range(T - 1, -1, -1):
        out[t] = trans @ (emit_x[:, x[t]] * out[t + 1])
    return out


def _normalize_log(v):
    return v - kernels.logsumexp_rows(v[None, :])[0]


def exact_compatibility(alpha, beta):
    """``C_t = log(norm(alpha_t) . norm(beta_t))``.

    At ``t = T`` (``beta_T = 1``) this equals ``-log k``; the logprob-to-go
    decomposition ``H_t = C_t + H_hat_t`` holds for every ``t``.
    """
    a = alpha.alpha if isinstance(alpha, ForwardVector) else np.asarray(alpha)
    b = beta.beta if isinstance(beta, BackwardVector) else np.asarray(beta)
    if not np.isfinite(a).any():
        return -np.inf
    joint = _normalize_log(a) + _normalize_log(b)
    return float(kernels.logsumexp_rows(joint[None, :])[0])


def exact_conditional(params, x, y_prefix, betas=None):
    """Exact ``p(y_t | x, y_{:t-1})`` for ``t = len(y_prefix) + 1``.

    Computed as ``softmax_y(g(s_{t-1}, x_t, y) + C_t(y))``.
    """
    x = np.asarray(x, dtype=np.int64)
    t = len(y_prefix) + 1
    if betas is None:
        betas = backward_vectors(params, x)
    alpha = initial_forward(params)
    for i, yi in enumerate(y_prefix):
        alpha = forward_step(params, alpha, int(x[i]), int(yi))
    return _conditional_from(params, alpha, betas[t], int(x[t - 1]))


def _conditional_from(params, alpha, beta, x_t):
    n_y = len(params.y_alphabet)
    prev = kernels.logsumexp_rows((alpha.alpha[:, None] + params.log_trans).T)
    G_prev = alpha.G
    logits = np.empty(n_y)
    for y in range(n_y):
        a_new = prev + params.log_emit[:, x_t, y]
        if not np.isfinite(a_new).any():
            logits[y] = -np.inf
            continue
        g = kernels.logsumexp_rows(a_new[None, :])[0] - G_prev
        logits[y] = g + exact_compatibility(a_new, beta.beta)
    if not np.isfinite(logits).any():
        raise ImpossiblePrefixError("no tag is possible at this step")
    m = logits.max()
    p = np.exp(logits - m)
    return p / p.sum()


def exact_sample(params, x, rng):
    """Draw ``y ~ p(y | x)`` one tag at a time.

    Each step inverts the cumulative distribution with a single uniform.
    Returns ``(y, dists)`` where ``dists[t-1]`` is the distribution ``y_t``
    was drawn from.
    """
    x = np.asarray(x, dtype=np.int64)
    betas = backward_vectors(params, x)
    alpha = initial_forward(params)
    ys, dists = [], []
    for t in range(1, len(x) + 1):
        p = _conditional_from(params, alpha, betas[t], int(x[t - 1]))
        yt = int(kernels.cumulative_inversion(p, [rng.random()])[0])
        ys.append(yt)
        dists.append(p)
        alpha = forward_step(params, alpha, int(x[t - 1]), yt)
    return np.array(ys, dtype=np.int64), np.array(dists).reshape(len(x), len(params.y_alphabet))


@dataclass
class Posterior:
    """Exact posterior table from enumeration."""

    paths: np.ndarray
    log_scores: np.ndarray
    log_z: float
    probs: np.ndarray

    @property
    def table(self):
        return {tuple(int(v) for v in p): float(q) for p, q in zip(self.paths, self.probs)}

    def conditional(self, prefix, n_y):
        """``p(y_t | x, y_{:t-1} = prefix)`` from the table."""
        prefix = np.asarray(prefix, dtype=np.int64)
        t = len(prefix)
        match = np.all(self.paths[:, :t] == prefix, axis=1) if t else np.ones(len(self.paths), bool)
        out = np.bincount(self.paths[match, t], weights=self.probs[match], minlength=n_y)
        return out / out.sum()


def brute_force_posterior(params, x, limit=ENUMERATION_LIMIT):
    """Exact ``p(y | x)`` over every tag sequence, plus ``log Z``."""
    x = np.asarray(x, dtype=np.int64)
    n_y = len(params.y_alphabet)
    if n_y ** len(x) > limit:
        raise EnumerationTooLargeError(f"|Y|^T = {n_y}^{len(x)} exceeds {limit}")
    paths = all_paths(n_y, len(x))
    log_emit_xy = params.log_emit[:, x, :].transpose(1, 2, 0)
    G = kernels.oohmm_score_paths(params.log_trans, log_emit_xy, paths, params.bos_index)
    log_z = float(kernels.logsumexp_rows(G[None, :])[0])
    with np.errstate(invalid="ignore"):
        probs = np.exp(G - log_z)
    return Posterior(paths, G, log_z, probs)


class OohmmModel(ScoringModel):
    """Scoring model whose state is the OOHMM belief vector."""

    def __init__(self, params):
        self.params = params
        self.x_alphabet = params.x_alphabet
        self.y_alphabet = params.y_alphabet

    @property
    def state_dim(self):
        return self.params.k

    def init_values(self):
        return initial_belief(self.params).dist

    def expand(self, states, x_t):
        pred = states @ self.params.trans
        vals = pred[:, None, :] * self.params.emit[:, x_t, :].T[None, :, :]
        sums = vals.sum(axis=2)
        ok = sums > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.log(sums)
            nxt = np.where(ok[:, :, None], vals / np.where(ok, sums, 1.0)[:, :, None], pred[:, None, :])
        return nxt, g
