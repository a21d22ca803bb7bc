"""Sequential importance sampling with optional multinomial resampling.

Each particle carries a tag prefix, its model state, ``G_t``, the previous
compatibility ``C_{t-1}`` and a log-weight.  One step draws
``y_t ~ q(. | s_{t-1}, x)`` and updates

    log w_t = log w_{t-1} + g(s_{t-1}, x_t, y_t) + C_t - C_{t-1} - log q(y_t)

starting from ``log w_0 = C_0``.  With ``C_t = 0`` this is the particle
filter.

Random numbers: particle ``m`` of resampling generation ``k`` reads
uniforms from ``SeedSequence(seed, spawn_key=(1, k, m))`` and the resampler
from ``SeedSequence(seed, spawn_key=(0, k))``.  Draws therefore do not
depend on ``M`` (particle ``m`` sees the same stream in every ensemble
size) or on how work is split across threads.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .proposal import ZeroCompatibility, proposal_logits

RESAMPLE_POLICIES = ("never", "ess", "always")


class DegenerateEnsembleError(RuntimeError):
    """Every particle has reached a zero-probability prefix."""


def ess(weights):
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    s = w.sum()
    if s <= 0:
        raise ValueError("all weights are zero")
    return float(s * s / np.dot(w, w))


def normalize_log_weights(logw):
    logw = np.asarray(logw, dtype=np.float64)
    lse = kernels.logsumexp_rows(logw[None, :])[0]
    if not np.isfinite(lse):
        raise DegenerateEnsembleError("all particle weights are zero")
    return np.exp(logw - lse)


# ---------------------------------------------------------------- random streams

def particle_stream(seed, generation, m):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, generation, m)))


def resampler_stream(seed, generation):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, generation)))


class ParticleStreams:
    """One generator per particle, renewed after each resampling."""

    def __init__(self, seed, M):
        self.seed, self.M, self.generation = int(seed), int(M), 0
        self._gens = [particle_stream(self.seed, 0, m) for m in range(M)]

    def uniforms(self):
        return np.array([g.random() for g in self._gens])

    def resampler(self):
        return resampler_stream(self.seed, self.generation)

    def renew(self):
        self.generation += 1
        self._gens = [particle_stream(self.seed, self.generation, m) for m in range(self.M)]


class SharedStream:
    """All particles read one generator (used by the trainer for speed)."""

    def __init__(self, rng, M):
        self.rng, self.M = rng, int(M)

    def uniforms(self):
        return self.rng.random(self.M)

    def resampler(self):
        return self.rng

    def renew(self):
        pass


# ---------------------------------------------------------------- ensembles

@dataclass(frozen=True)
class Particle:
    y: tuple
    state: np.ndarray
    log_w: float
    G: float
    C_prev: float

    @property
    def dead(self):
        return not np.isfinite(self.log_w)


@dataclass
class Ensemble:
    """Array-of-particles representation of ``Y_t``."""

    paths: np.ndarray
    states: np.ndarray
    logw: np.ndarray
    G: np.ndarray
    C_prev: np.ndarray
    logq: np.ndarray
    t: int = 0
    log_shift: float = 0.0
    log_evidence: float = 0.0

    @property
    def M(self):
        return len(self.logw)

    @classmethod
    def initial(cls, s0, M, C0):
        M = int(M)
        if M < 1:
            raise ValueError("M must be at least 1")
        return cls(np.zeros((M, 0), dtype=np.int64), np.tile(np.asarray(s0, dtype=np.float64), (M, 1)),
                   np.full(M, float(C0)), np.zeros(M), np.full(M, float(C0)), np.zeros(M))

    @property
    def particles(self):
        return [Particle(tuple(int(v) for v in self.paths[m]), self.states[m].copy(), float(self.logw[m]),
                         float(self.G[m]), float(self.C_prev[m])) for m in range(self.M)]

    def weights(self):
        return normalize_log_weights(self.logw)

    def raw_log_weights(self):
        """Log-weights before the running max-subtraction."""
        return self.logw + self.log_shift

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Ensemble(self.paths[idx].copy(), self.states[idx].copy(), self.logw[idx].copy(),
                        self.G[idx].copy(), self.C_prev[idx].copy(), self.logq[idx].copy(), self.t,
                        self.log_shift, self.log_evidence)


def multinomial_resample(ensemble, rng):
    """``M`` IID draws from the normalized weights; log-weights reset to 0.

    The evidence estimate absorbs the mean weight of the old ensemble so
    that ``exp(log_evidence)`` stays unbiased for ``Z``.
    """
    w = ensemble.weights()
    M = ensemble.M
    idx = kernels.cumulative_inversion(w, rng.random(M))
    raw = ensemble.raw_log_weights()
    out = ensemble.take(idx)
    out.log_evidence = ensemble.log_evidence + float(kernels.logsumexp_rows(raw[None, :])[0]) - math.log(M)
    out.logw = np.zeros(M)
    out.log_shift = 0.0
    return out


@dataclass
class WeightedSample:
    """Distinct sequences with normalized weights ``p̂``."""

    sequences: list
    weights: np.ndarray
    G: np.ndarray
    log_evidence: float = float("nan")
    particle_paths: np.ndarray = None
    particle_log_w: np.ndarray = None
    particle_G: np.ndarray = None
    particle_logq: np.ndarray = None
    log_w0: float = 0.0
    diagnostics: list = field(default_factory=list)

    def __len__(self):
        return len(self.sequences)

    def as_dict(self):
        return {tuple(s): float(w) for s, w in zip(self.sequences, self.weights)}

    def expectation(self, f):
        return float(sum(w * f(s) for s, w in zip(self.sequences, self.weights)))

    @property
    def ess_mean(self):
        vals = [d["ess"] for d in self.diagnostics]
        return float(np.mean(vals)) if vals else float("nan")


def weighted_sample(paths, logw, G, **kw):
    """Collapse particles into a :class:`WeightedSample` (lexicographic order)."""
    w = normalize_log_weights(logw)
    acc, gs = {}, {}
    for m in range(len(w)):
        if w[m] <= 0.0:
            continue
        key = tuple(int(v) for v in paths[m])
        acc[key] = acc.get(key, 0.0) + w[m]
        gs[key] = float(G[m])
    seqs = sorted(acc)
    return WeightedSample(seqs, np.array([acc[s] for s in seqs]), np.array([gs[s] for s in seqs]), **kw)


def batch_importance_sample(paths, G, logq, C0=0.0):
    """Normalized importance sampling on complete proposed sequences.

    ``w = exp(C_0) exp(G_T) / q(y)``; equivalent to the sequential weights
    when no resampling happened.
    """
    return weighted_sample(paths, C0 + np.asarray(G) - np.asarray(logq), G)


# ---------------------------------------------------------------- samplers

def run_smoother(model, proposal, x_idx, M, resample="ess", seed=0, streams=None, ctx=None,
                 diagnostics_path=None):
    """Particle smoothing of ``p(y | x)`` with ``M`` particles.

    ``resample`` is one of ``never``, ``ess`` (when ESS < M/2) or
    ``always``; resampling is never applied after the last step.
    Returns a :class:`WeightedSample` whose ``diagnostics`` list holds
    per-step ESS, resampling events, weight quantiles and the variance of
    the normalized weights.
    """
    if resample not in RESAMPLE_POLICIES:
        raise ValueError(f"unknown resampling policy {resample!r}")
    x_idx = np.asarray(x_idx, dtype=np.int64)
    model.check_input(x_idx)
    ctx = ctx if ctx is not None else proposal.prepare(x_idx)
    streams = streams if streams is not None else ParticleStreams(seed, M)
    s0 = model.init_values()
    C0 = proposal.initial_compat(ctx, s0)
    ens = Ensemble.initial(s0, M, C0)
    Tn = len(x_idx)
    diags = []
    for t in range(1, Tn + 1):
        cand, g, C, logq = proposal_logits(model, proposal, ctx, t, ens.states)
        u = streams.uniforms()
        alive = np.isfinite(logq).any(axis=1) & np.isfinite(ens.logw)
        ys = np.zeros(M, dtype=np.int64)
        for m in np.nonzero(alive)[0]:
            ys[m] = kernels.cumulative_inversion(np.exp(logq[m]), u[m:m + 1])[0]
        rows = np.arange(M)
        with np.errstate(invalid="ignore"):  # dead rows give nan; masked below
            inc = g[rows, ys] + C[rows, ys] - ens.C_prev - logq[rows, ys]
        ens.logw = np.where(alive, ens.logw + inc, -np.inf)
        ens.G = np.where(alive, ens.G + g[rows, ys], -np.inf)
        ens.logq = np.where(alive, ens.logq + logq[rows, ys], -np.inf)
        ens.C_prev = np.where(alive, C[rows, ys], ens.C_prev)
        ens.states = np.where(alive[:, None], cand[rows, ys], ens.states)
        ens.paths = np.concatenate([ens.paths, ys[:, None]], axis=1)
        ens.t = t
        if not alive.any():
            raise DegenerateEnsembleError(f"all {M} particles died at step {t}")
        shift = float(ens.logw[alive].max())
        ens.logw = ens.logw - shift
        ens.log_shift += shift
        w = ens.weights()
        e = ess(w)
        did = False
        if t < Tn and (resample == "always" or (resample == "ess" and e < M / 2)):
            ens = multinomial_resample(ens, streams.resampler())
            streams.renew()
            did = True
        q = np.quantile(w, [0.05, 0.5, 0.95])
        diags.append({"t": t, "ess": e, "resampled": did, "n_dead": int((~alive).sum()),
                      "w_q05": float(q[0]), "w_q50": float(q[1]), "w_q95": float(q[2]),
                      "w_var": float(np.var(w))})
    if Tn == 0:
        diags = []
    log_ev = ens.log_evidence + float(kernels.logsumexp_rows(ens.raw_log_weights()[None, :])[0]) - math.log(M)
    if diagnostics_path is not None:
        with open(diagnostics_path, "a") as fh:
            for d in diags:
                fh.write(json.dumps(d, sort_keys=True) + "\n")
    return weighted_sample(ens.paths, ens.logw, ens.G, log_evidence=log_ev, particle_paths=ens.paths,
                           particle_log_w=ens.raw_log_weights(), particle_G=ens.G,
                           particle_logq=ens.logq, log_w0=C0, diagnostics=diags)


def run_filter(model, x_idx, M, resample="ess", seed=0, **kw):
    """Particle filtering: :func:`run_smoother` with ``C_t = 0``."""
    return run_smoother(model, ZeroCompatibility(), x_idx, M, resample, seed, **kw)


def beam_search(model, x_idx, M):
    """Width-``M`` beam over prefixes ranked by ``G_t``.

    Ties are broken by lexicographic tag order.  Returns a list of
    ``(y, G_T)`` sorted best first.
    """
    x_idx = np.asarray(x_idx, dtype=np.int64)
    model.check_input(x_idx)
    states = model.init_values()[None, :]
    G = np.zeros(1)
    paths = [()]
    for t in range(len(x_idx)):
        cand, g = model.expand(states, int(x_idx[t]))
        n, Y = g.shape
        total = G[:, None] + g
        items = [(-total[i, y], paths[i] + (y,), i, y) for i in range(n) for y in range(Y)
                 if np.isfinite(total[i, y])]
        items.sort(key=lambda it: (it[0], it[1]))
        items = items[:M]
        if not items:
            return []
        states = np.array([cand[i, y] for _, _, i, y in items])
        G = np.array([-negG for negG, _, _, _ in items])
        paths = [p for _, p, _, _ in items]
    return list(zip(paths, (float(v) for v in G)))


def beam_sample(model, x_idx, M):
    """Beam output as ``p̂ ∝ exp G_T`` over the beam's sequences."""
    beam = beam_search(model, x_idx, M)
    if not beam:
        raise DegenerateEnsembleError("beam search found no complete sequence")
    paths = np.array([p for p, _ in beam], dtype=np.int64).reshape(len(beam), -1)
    G = np.array([g for _, g in beam])
    return weighted_sample(paths, G, G)
