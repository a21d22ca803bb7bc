"""Offset-KL evaluation of samplers against a pooled estimate of ``log Z``.

For each input ``x`` a :class:`ParticlePool` keeps every distinct tagging
ever drawn (by any sampler, at any ``M``) with its ``G_T``.  Its
log-sum-exp ``z(x)`` is a lower bound on ``log Z(x)``, and

    offset_kl = sum_y p̂(y) [log p̂(y) - G_T(y)] + z(x)

is the KL divergence ``KL(p̂ || p)`` with ``log Z`` replaced by ``z``.
Replacing ``z`` by ``z + c`` shifts every sampler by the same ``c``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .smc import beam_sample, run_filter, run_smoother

LN2 = math.log(2.0)
RESULT_COLUMNS = ("task", "sampler", "M", "resample", "seed", "offset_kl_bits", "ess_mean", "wall_ms")
DEFAULT_M_GRID = (8, 16, 32, 64, 128)
SAMPLERS = {
    "PF": ("filter", "never"),
    "PS": ("smoother", "never"),
    "PF:R": ("filter", "ess"),
    "PS:R": ("smoother", "ess"),
    "BEAM": ("beam", "none"),
}


class PoolCoverageError(KeyError):
    """A sampled sequence is missing from the pool."""


def input_key(x_idx, task=""):
    """Stable hash of an input sequence (and task name)."""
    body = task + ":" + ",".join(str(int(v)) for v in x_idx)
    return hashlib.sha1(body.encode()).hexdigest()


class ParticlePool:
    """Per-input sets of distinct sequences with their ``G_T``."""

    def __init__(self):
        self.entries = {}

    def add(self, key, sequences, G):
        bucket = self.entries.setdefault(key, {})
        for y, g in zip(sequences, G):
            g = float(g)
            if np.isfinite(g):
                bucket.setdefault(tuple(int(v) for v in y), g)
        return self

    def size(self, key):
        return len(self.entries.get(key, {}))

    def __contains__(self, item):
        key, y = item
        return tuple(y) in self.entries.get(key, {})

    def z(self, key):
        bucket = self.entries.get(key)
        if not bucket:
            return -math.inf
        vals = np.array(sorted(bucket.values()))
        return float(kernels.logsumexp_rows(vals[None, :])[0])

    def save(self, path):
        """Write the pool as JSON lines of ``{"key", "y", "G"}``."""
        with open(path, "w") as fh:
            for key in sorted(self.entries):
                for y, g in sorted(self.entries[key].items()):
                    fh.write(json.dumps({"key": key, "y": list(y), "G": g}) + "\n")

    @classmethod
    def load(cls, path):
        pool = cls()
        if Path(path).exists():
            with open(path) as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        pool.add(rec["key"], [rec["y"]], [rec["G"]])
        return pool


def offset_kl(phat, pool, key):
    """Offset KL divergence of ``phat`` in nats (pool must cover its support)."""
    bucket = pool.entries.get(key, {})
    total = 0.0
    for y, w, g in zip(phat.sequences, phat.weights, phat.G):
        if w <= 0:
            continue
        if tuple(y) not in bucket:
            raise PoolCoverageError(f"sequence {tuple(y)} not in pool; update the pool first")
        total += w * (math.log(w) - g)
    return total + pool.z(key)


def pool_update(pool, key, sample, model=None, x_idx=None, smoothing_M=0, seed=0):
    """Insert a sample; a smoothing run of size M also adds 2M filtering draws."""
    pool.add(key, sample.sequences, sample.G)
    if smoothing_M:
        if model is None or x_idx is None:
            raise ValueError("extra filtering draws need the model and input")
        extra = run_filter(model, x_idx, 2 * smoothing_M, "never", seed=extra_seed(seed))
        pool.add(key, extra.sequences, extra.G)
    return pool


def extra_seed(seed):
    """Seed for the pool's extra filtering draws, distinct from the run's own."""
    return int(np.random.SeedSequence(seed, spawn_key=(2,)).generate_state(1)[0])


# ---------------------------------------------------------------- experiments

@dataclass
class EvalReport:
    rows: list
    meta: dict = field(default_factory=dict)

    def to_csv(self, path=None, timing=False):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in self.rows:
            vals = []
            for c in RESULT_COLUMNS:
                v = r.get(c, "")
                if c == "wall_ms" and not timing:
                    v = ""
                if isinstance(v, float):
                    v = "" if math.isnan(v) else repr(round(v, 12))
                vals.append(v)
            w.writerow(vals)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def mean_bits(self, sampler, M):
        vals = [r["offset_kl_bits"] for r in self.rows if r["sampler"] == sampler and r["M"] == M]
        return float(np.mean(vals)) if vals else float("nan")


def _draw(kind, resample, model, proposal, x_idx, M, seed):
    t0 = time.perf_counter()
    if kind == "beam":
        s = beam_sample(model, x_idx, M)
    elif kind == "filter":
        s = run_filter(model, x_idx, M, resample, seed=seed)
    else:
        s = run_smoother(model, proposal, x_idx, M, resample, seed=seed)
    return s, (time.perf_counter() - t0) * 1000.0


def example_seed(seed, i):
    return int(np.random.SeedSequence(seed, spawn_key=(3, i)).generate_state(1)[0])


def run_experiment(model, proposal, inputs, task="task", samplers=("PF", "PS", "PF:R", "PS:R", "BEAM"),
                   M_grid=DEFAULT_M_GRID, seeds=(0,), pool=None, threads=1):
    """Sweep samplers x M x seeds over ``inputs`` (index arrays).

    ``proposal`` is one proposal or a mapping ``label -> proposal``; with a
    mapping, smoother rows are labelled ``PS[label]``.  Every draw is pooled
    per input before any offset KL is computed, so all points share one
    ``z(x)``.  Rows report the mean over inputs in bits.
    """
    pool = pool if pool is not None else ParticlePool()
    keys = [input_key(x, task) for x in inputs]
    named = dict(proposal) if isinstance(proposal, dict) else {None: proposal}
    points = []
    for name in samplers:
        kind = SAMPLERS[name][0]
        labels = list(named) if kind == "smoother" else [None]
        for label in labels:
            for M in M_grid:
                for seed in (seeds if kind != "beam" else (None,)):
                    points.append((name, label, M, seed))

    def work(i):
        x = inputs[i]
        out = []
        local = ParticlePool()
        for name, label, M, seed in points:
            kind, resample = SAMPLERS[name]
            s_seed = example_seed(seed if seed is not None else 0, i)
            sample, ms = _draw(kind, resample, model, named.get(label), x, M, s_seed)
            pool_update(local, keys[i], sample, model, x, M if kind == "smoother" else 0, s_seed)
            out.append((sample, ms))
        return out, local

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, range(len(inputs))))
    else:
        results = [work(i) for i in range(len(inputs))]
    for (_, local), key in zip(results, keys):
        for y, g in local.entries.get(key, {}).items():
            pool.add(key, [y], [g])
    rows = []
    for j, (name, label, M, seed) in enumerate(points):
        kls, esses, times = [], [], []
        for i, key in enumerate(keys):
            sample, ms = results[i][0][j]
            kls.append(offset_kl(sample, pool, key))
            esses.append(sample.ess_mean)
            times.append(ms)
        kind, resample = SAMPLERS[name]
        rows.append({"task": task, "sampler": name if label is None else f"{name}[{label}]", "M": M,
                     "resample": resample, "seed": "" if seed is None else seed,
                     "offset_kl_bits": float(np.mean(kls)) / LN2,
                     "ess_mean": float("nan") if kind == "beam" else float(np.nanmean(esses)),
                     "wall_ms": float(np.sum(times))})
    meta = {"beam_weighting": "p_hat proportional to exp(G_T) over the beam",
            "pool_extra_filter_factor": 2, "n_inputs": len(inputs)}
    return EvalReport(rows, meta), pool


def evaluate_sampler(model, proposal, inputs, M, kind="smoother", resample="never", seed=0,
                     pool=None, task="eval"):
    """Mean offset KL (nats) of one sampler; the pool is updated in place."""
    pool = pool if pool is not None else ParticlePool()
    samples, keys = [], []
    for i, x in enumerate(inputs):
        key = input_key(x, task)
        s_seed = example_seed(seed, i)
        sample, _ = _draw(kind, resample, model, proposal, x, M, s_seed)
        pool_update(pool, key, sample, model, x, M if kind == "smoother" else 0, s_seed)
        samples.append(sample)
        keys.append(key)
    return samples, keys, pool


def mean_offset_kl(samples, keys, pool):
    return float(np.mean([offset_kl(s, pool, k) for s, k in zip(samples, keys)]))
