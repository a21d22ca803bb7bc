"""Training the proposal parameters with the model held fixed.

The objective is ``(1 - lam) KL(p || q) + lam KL(q || p)``.

* Inclusive part: ``E_{p̂}[-log q(y)]`` where ``p̂`` is the self-normalized
  importance sample drawn with the current proposal; the weights of ``p̂``
  are treated as constants.
* Exclusive part: the likelihood-ratio estimator
  ``mean_m (d(y_m) - b) grad log q(y_m)`` with ``d = log q - G_T`` and a
  moving-average baseline ``b``.

Both terms reuse one set of ``M`` draws per example taken without
resampling, so the draws are IID from ``q``.

Each example is processed in two passes.  The sampling pass runs in plain
numpy and records, for every step, the model states, candidate next states
and local scores.  The tape pass then recomputes ``log q`` of the drawn tags
from those records, batched over steps, particles and candidates.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import Adam
from .evaluation import ParticlePool, evaluate_sampler, offset_kl
from .proposal import DeadEndError, proposal_logits
from .smc import normalize_log_weights

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ("epoch", "split", "offset_kl", "mean_d", "b", "wall_clock")


@dataclass
class TrainConfig:
    lam: float = 0.5
    M_train: int = 32
    batch_size: int = 16
    max_epochs: int = 20
    baseline_decay: tuple = (0.1, 0.9)
    seed: int = 0
    lr: float = 1e-3
    l2: float = 1e-5
    patience: int = 3
    eval_M: int = 32
    eval_resample: str = "never"
    steps_per_epoch: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.M_train < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("M_train, batch_size must be positive and max_epochs nonnegative")
        self.baseline_decay = tuple(float(v) for v in self.baseline_decay)


@dataclass
class BaselineState:
    b: float = 0.0
    updates: int = 0


def baseline_update(state, mean_d, decay=(0.1, 0.9)):
    """``b <- 0.1 b + 0.9 d̄``."""
    mean_d = float(mean_d)
    if not math.isfinite(mean_d):
        raise ValueError("baseline update needs a finite mean")
    return BaselineState(decay[0] * state.b + decay[1] * mean_d, state.updates + 1)


# ---------------------------------------------------------------- trajectories

@dataclass
class Trajectories:
    """Records of one proposal run over ``x`` (no resampling)."""

    x: np.ndarray
    prev: np.ndarray
    cand: np.ndarray
    g: np.ndarray
    ys: np.ndarray
    G: np.ndarray
    logq: np.ndarray

    @property
    def M(self):
        return self.ys.shape[1]

    @property
    def paths(self):
        return self.ys.T.copy()


def trajectories(model, proposal, x_idx, M=None, rng=None, paths=None, ctx=None):
    """Draw ``M`` sequences from ``q`` (or follow the given ``paths``).

    Raises :class:`DeadEndError` if a forced path leaves the support of ``q``.
    """
    x_idx = np.asarray(x_idx, dtype=np.int64)
    ctx = ctx if ctx is not None else proposal.prepare(x_idx)
    if paths is not None:
        paths = np.asarray(paths, dtype=np.int64).reshape(-1, len(x_idx))
        M = len(paths)
    Tn = len(x_idx)
    states = np.tile(model.init_values(), (M, 1))
    D = states.shape[1]
    n_y = len(model.y_alphabet)
    prev = np.empty((Tn, M, D))
    cand_all = np.empty((Tn, M, n_y, D))
    g_all = np.empty((Tn, M, n_y))
    ys = np.empty((Tn, M), dtype=np.int64)
    G = np.zeros(M)
    logq = np.zeros(M)
    rows = np.arange(M)
    for t in range(1, Tn + 1):
        cand, g, C, lq = proposal_logits(model, proposal, ctx, t, states)
        if paths is not None:
            y = paths[:, t - 1]
        else:
            q = np.exp(lq)
            cdf = np.cumsum(q, axis=1)
            u = rng.random(M)[:, None] * cdf[:, -1:]
            y = np.minimum((cdf <= u).sum(axis=1), n_y - 1)
            # guard against landing on a zero-probability tag through rounding
            bad = q[rows, y] <= 0
            if bad.any():
                y[bad] = np.argmax(q[bad], axis=1)
        step_lq = lq[rows, y]
        if not np.isfinite(step_lq).all():
            raise DeadEndError(f"proposal gives zero probability to a tag at step {t}")
        prev[t - 1] = states
        cand_all[t - 1] = cand
        g_all[t - 1] = g
        ys[t - 1] = y
        G += g[rows, y]
        logq += step_lq
        states = cand[rows, y]
    return Trajectories(x_idx, prev, cand_all, g_all, ys, G, logq)


def logq_tape(proposal, traj):
    """``log q(y_m)`` of recorded draws as a tensor of shape ``(M,)``.

    ``C_T = 0`` so only steps ``1 .. T-1`` involve the network.
    """
    Tn, M = traj.ys.shape
    if Tn == 0:
        return T.Tensor(np.zeros(M))
    n_y = traj.g.shape[2]
    mask = np.isfinite(traj.g)
    g0 = np.where(mask, traj.g, 0.0)
    if Tn > 1:
        sbar = proposal.encoder.encode(traj.x)
        N = (Tn - 1) * M
        t_idx = np.repeat(np.arange(1, Tn), M)
        sb = T.take_rows(sbar, t_idx)
        C = proposal.cnet(traj.prev[:-1].reshape(N, -1), traj.cand[:-1].reshape(N, n_y, -1), sb)
        C = T.concat([C, np.zeros((M, n_y))], axis=0)
    else:
        C = T.Tensor(np.zeros((M, n_y)))
    logits = T.add(C, g0.reshape(Tn * M, n_y))
    lq = T.log_softmax(logits, axis=1, mask=mask.reshape(Tn * M, n_y))
    picked = T.pick(lq, traj.ys.reshape(-1))
    return T.tsum(T.reshape(picked, (Tn, M)), axis=0)


def d_phi(model, proposal, x_idx, y_idx):
    """``d(y) = log q(y) - G_T(y)`` along a given tagging."""
    traj = trajectories(model, proposal, x_idx, paths=np.asarray(y_idx)[None, :])
    return float(traj.logq[0] - traj.G[0])


# ---------------------------------------------------------------- gradient estimators

def _grads(loss, params):
    with_tape = getattr(loss, "requires_grad", False)
    if not with_tape:
        return {p: np.zeros_like(p.value) for p in params}
    return T._active_tape().backward(loss, params)


def inclusive_loss(traj, lq=None, weights=None, proposal=None):
    """Tape surrogate ``-sum_m p̂_m log q(y_m)`` with ``p̂`` held constant."""
    lq = lq if lq is not None else logq_tape(proposal, traj)
    if weights is None:
        weights = normalize_log_weights(traj.G - traj.logq)
    return T.mul(T.tsum(T.mul(lq, np.asarray(weights))), -1.0)


def exclusive_loss(traj, b, lq=None, proposal=None, form="score"):
    """Tape surrogate whose gradient is ``mean_m (d_m - b) grad log q(y_m)``.

    ``form="squared"`` uses ``mean_m 1/2 (d_m - b)^2`` with ``d`` on the
    tape, which has the same gradient because ``G_T`` does not depend on
    the proposal.
    """
    lq = lq if lq is not None else logq_tape(proposal, traj)
    M = traj.M
    if form == "score":
        coef = (traj.logq - traj.G - b) / M
        return T.tsum(T.mul(lq, coef))
    if form == "squared":
        dm = T.sub(lq, traj.G) - b
        return T.mul(T.tsum(T.square(dm)), 0.5 / M)
    raise ValueError(f"unknown exclusive form {form!r}")


def inclusive_grad(model, proposal, x_idx, M=32, rng=None, paths=None, weights=None, params=None):
    """Gradient of the inclusive surrogate for one input.

    By default ``p̂`` comes from ``M`` fresh draws; pass ``paths`` and
    ``weights`` to use a given (for instance exactly enumerated) ``p̂``.
    """
    params = params if params is not None else proposal.trainable()
    rng = rng if rng is not None else np.random.default_rng(0)
    traj = trajectories(model, proposal, x_idx, M, rng, paths=paths)
    with T.Tape():
        loss = inclusive_loss(traj, proposal=proposal, weights=weights)
        return _grads(loss, params)


def exclusive_grad(model, proposal, x_idx, n_samples=32, baseline=None, rng=None, paths=None,
                   form="score", params=None):
    """Likelihood-ratio estimate of ``grad KL(q || p)`` for one input."""
    params = params if params is not None else proposal.trainable()
    rng = rng if rng is not None else np.random.default_rng(0)
    b = baseline.b if baseline is not None else 0.0
    traj = trajectories(model, proposal, x_idx, n_samples, rng, paths=paths)
    with T.Tape():
        loss = exclusive_loss(traj, b, proposal=proposal, form=form)
        return _grads(loss, params)


def combined_loss(model, proposal, x_idx, cfg, b, rng):
    """Tape loss of one example plus the mean ``d`` of its draws."""
    traj = trajectories(model, proposal, x_idx, cfg.M_train, rng)
    lq = logq_tape(proposal, traj)
    parts = []
    if cfg.lam < 1.0:
        parts.append(T.mul(inclusive_loss(traj, lq), 1.0 - cfg.lam))
    if cfg.lam > 0.0:
        parts.append(T.mul(exclusive_loss(traj, b, lq), cfg.lam))
    loss = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return loss, float(np.mean(traj.logq - traj.G))


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_dev_kl: float = math.inf
    initial_dev_kl: float = math.nan
    baseline: BaselineState = field(default_factory=BaselineState)


class _DevTracker:
    """Dev offset KL with one pool shared across epochs.

    Every evaluation uses the same seed (common random numbers), and the
    best epoch's samples are re-scored against the current pool so that
    comparisons always use the same ``z(x)``.
    """

    def __init__(self, model, inputs, cfg):
        self.model, self.inputs, self.cfg = model, inputs, cfg
        self.pool = ParticlePool()
        self.best_samples = None

    def evaluate(self, proposal, epoch):
        samples, keys, _ = evaluate_sampler(self.model, proposal, self.inputs, self.cfg.eval_M,
                                            "smoother", self.cfg.eval_resample,
                                            seed=self.cfg.seed + 7919,
                                            pool=self.pool, task="dev")
        self.keys = keys
        return samples, self.mean(samples)

    def mean(self, samples):
        return float(np.mean([offset_kl(s, self.pool, k) for s, k in zip(samples, self.keys)]))


def train_proposal(model, proposal, corpus, config=None, dev=None, log_path=None, checkpoint_path=None,
                   timing=False):
    """Fit ``proposal`` to ``model`` on the inputs in ``corpus``.

    ``corpus`` and ``dev`` are lists of input index arrays (tags are never
    needed).  Early stopping on dev offset KL; the best parameters are left
    loaded and, if ``checkpoint_path`` is given, saved there.
    """
    cfg = config or TrainConfig()
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    corpus = [np.asarray(x, dtype=np.int64) for x in corpus]
    dev = [np.asarray(x, dtype=np.int64) for x in (dev if dev else corpus[: min(50, len(corpus))])]
    rng = np.random.default_rng(cfg.seed)
    params = proposal.trainable()
    opt = Adam(params, lr=cfg.lr, l2=cfg.l2)
    baseline = BaselineState()
    tracker = _DevTracker(model, dev, cfg)
    result = TrainResult()
    t_start = time.perf_counter()
    rows = []

    def record(epoch, split, kl, mean_d):
        wall = f"{time.perf_counter() - t_start:.3f}" if timing else ""
        rows.append((epoch, split, repr(round(kl, 12)), repr(round(mean_d, 12)), repr(round(baseline.b, 12)), wall))
        result.history.append({"epoch": epoch, "split": split, "offset_kl": kl, "mean_d": mean_d, "b": baseline.b})

    # epoch 0 is the untrained reference; the stopping point is chosen among 1..max_epochs
    samples0, kl0 = tracker.evaluate(proposal, 0)
    best_samples, best_state = None, proposal.state_dict()
    result.initial_dev_kl = kl0
    record(0, "dev", kl0, float("nan"))
    bad = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(corpus))
        if cfg.steps_per_epoch:
            order = order[: cfg.steps_per_epoch * cfg.batch_size]
        ds = []
        for i in range(0, len(order), cfg.batch_size):
            batch = order[i:i + cfg.batch_size]
            with T.Tape() as tape:
                losses, dbar = [], []
                for j in batch:
                    loss, md = combined_loss(model, proposal, corpus[j], cfg, baseline.b, rng)
                    losses.append(loss)
                    dbar.append(md)
                total = losses[0]
                for extra in losses[1:]:
                    total = total + extra
                total = T.mul(total, 1.0 / len(batch))
                grads = _grads(total, params)
            opt.update(grads)
            baseline = baseline_update(baseline, np.mean(dbar), cfg.baseline_decay)
            ds.extend(dbar)
        samples, kl = tracker.evaluate(proposal, epoch)
        best_now = tracker.mean(best_samples) if best_samples is not None else math.inf
        record(epoch, "train", float("nan"), float(np.mean(ds)))
        record(epoch, "dev", kl, float("nan"))
        log.info("epoch %d dev offset KL %.4f (best so far %.4f)", epoch, kl, best_now)
        if kl < best_now:
            best_samples, best_state, bad = samples, proposal.state_dict(), 0
            result.best_epoch, result.best_dev_kl = epoch, kl
        else:
            result.best_dev_kl = best_now
            bad += 1
            if bad >= cfg.patience:
                break
    proposal.load_state_dict(best_state)
    # both ends re-scored against the final pool, so they share one z(x)
    result.initial_dev_kl = tracker.mean(samples0)
    if best_samples is None:
        result.best_dev_kl = result.initial_dev_kl
    else:
        result.best_dev_kl = tracker.mean(best_samples)
    result.baseline = baseline
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAIN_LOG_COLUMNS)
            w.writerows(rows)
    if checkpoint_path is not None:
        proposal.save(checkpoint_path, extra={"train_config": _jsonable(asdict(cfg)),
                                              "best_epoch": result.best_epoch})
    return result


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
