"""Concrete scoring models: the pair-alphabet tagger and source separation.

Both are built on a small GRU language model (:class:`RNNLM`).  Its state is
the hidden vector ``h``; the next-symbol distribution is a softmax of an
affine map of ``h``, and the state advances by one GRU step on the embedding
of the emitted symbol.  The softmax has one extra "stop" outcome so that the
LM is a proper distribution over finite strings.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import tensor as T
from .autodiff.nn import Adam, Embedding, GRUCell, Linear, Module, load_checkpoint, save_checkpoint
from .scoring import EOS, Alphabet, InvalidSymbolError, ScoringModel

log = logging.getLogger(__name__)


def _log_softmax_rows(logits):
    return logits - kernels.logsumexp_rows(logits)[:, None]


class RNNLM(Module):
    """GRU language model over ``n_sym`` symbols plus a stop outcome.

    The stop outcome has index ``n_sym`` in :meth:`log_probs`.
    """

    def __init__(self, n_sym, d=32, emb=16, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_sym, self.d, self.emb_dim = int(n_sym), int(d), int(emb)
        self.embed = Embedding(n_sym, emb, rng)
        self.cell = GRUCell(emb, d, rng)
        self.out = Linear(d, n_sym + 1, rng)

    @property
    def state_dim(self):
        return self.d

    def init_values(self):
        return np.zeros(self.d)

    def log_probs(self, states):
        """``(N, n_sym + 1)`` next-symbol log-probabilities (stop last)."""
        return _log_softmax_rows(self.out.values(states))

    def advance(self, states, symbols):
        x = self.embed.values(symbols)
        return self.cell.values(np.ascontiguousarray(x), np.ascontiguousarray(states))

    def advance_all(self, states, symbols):
        """``(N, len(symbols), d)``: every state advanced by every symbol."""
        W, U, b = self.cell.W.value, self.cell.U.value, self.cell.b.value
        xa = self.embed.values(np.asarray(symbols)) @ W + b
        states = np.ascontiguousarray(states)
        return kernels.gru_expand(xa, states @ U, states)

    # training

    def batch_nll(self, seqs):
        """Tape loss: summed negative log-likelihood (stop included) and token count."""
        B = len(seqs)
        L = max(len(s) for s in seqs)
        lengths = np.array([len(s) for s in seqs])
        targets = np.full((B, L + 1), self.n_sym, dtype=np.int64)
        for i, s in enumerate(seqs):
            targets[i, :len(s)] = s
        h = T.Tensor(np.zeros((B, self.d)))
        total = None
        for t in range(L + 1):
            lp = T.log_softmax(self.out(h), axis=1)
            mask = (t <= lengths).astype(np.float64)
            term = T.tsum(T.mul(T.pick(lp, targets[:, t]), mask))
            total = term if total is None else total + term
            if t < L:
                inp = np.where(t < lengths, targets[:, t], 0)
                h = self.cell(self.embed(inp), h)
        return T.mul(total, -1.0), int((lengths + 1).sum())

    def nll(self, seqs, batch_size=256):
        """Total negative log-likelihood and token count (no tape)."""
        tot, n = 0.0, 0
        for i in range(0, len(seqs), batch_size):
            loss, k = self.batch_nll(seqs[i:i + batch_size])
            tot += float(loss.value)
            n += k
        return tot, n

    def sequence_logprob(self, seq):
        """``log p(seq, stop)`` by sequential scoring."""
        h = self.init_values()[None, :]
        total = 0.0
        for c in seq:
            total += float(self.log_probs(h)[0, c])
            h = self.advance(h, np.array([c]))
        return total + float(self.log_probs(h)[0, self.n_sym])

    def sample(self, rng, max_len=50):
        h = self.init_values()[None, :]
        out = []
        while len(out) < max_len:
            p = np.exp(self.log_probs(h)[0])
            c = int(kernels.cumulative_inversion(p, [rng.random()])[0])
            if c == self.n_sym:
                break
            out.append(c)
            h = self.advance(h, np.array([c]))
        return out


def train_lm(lm, train, dev, max_epochs=3, lr=1e-3, l2=1e-5, batch_size=32, seed=0, patience=1):
    """Maximum likelihood with Adam and early stopping on dev perplexity.

    ``train`` and ``dev`` are lists of integer sequences.  Returns a history
    of ``(epoch, train_loss, dev_perplexity)``; the best parameters (lowest
    dev perplexity) are left loaded in ``lm``.
    """
    if not train:
        raise ValueError("empty training corpus")
    max_epochs = int(max_epochs)
    rng = np.random.default_rng(seed)
    opt = Adam(lm.parameters(), lr=lr, l2=l2)
    history = []
    best, best_state, bad = math.inf, lm.state_dict(), 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), batch_size):
            batch = [train[j] for j in order[i:i + batch_size]]
            with T.Tape() as tape:
                loss, n = lm.batch_nll(batch)
                loss = T.mul(loss, 1.0 / n)
            opt.update(tape.backward(loss, opt.params))
            losses.append(float(loss.value))
        tot, n = lm.nll(dev) if dev else lm.nll(train)
        ppl = math.exp(tot / n)
        history.append((epoch, float(np.mean(losses)), ppl))
        log.info("lm epoch %d: train %.4f dev ppl %.4f", epoch, np.mean(losses), ppl)
        if ppl < best:
            best, best_state, bad = ppl, lm.state_dict(), 0
        else:
            bad += 1
            if bad >= patience:
                break
    lm.load_state_dict(best_state)
    return history


# ---------------------------------------------------------------- pair-LM tagger

class PairLM(ScoringModel):
    """Tagger defined by a GRU language model over the pair alphabet X x Y.

    ``g(s, x, y) = log p(x, y | s)``.  The stop outcome is part of the LM but
    not of ``G_T``, so summing ``exp G_T`` over all pairs of length ``T``
    gives the probability that the LM emits at least ``T`` symbols.
    """

    kind = "pairlm"

    def __init__(self, x_alphabet, y_alphabet, d=32, emb=16, seed=0):
        self.x_alphabet = x_alphabet if isinstance(x_alphabet, Alphabet) else Alphabet(x_alphabet)
        self.y_alphabet = y_alphabet if isinstance(y_alphabet, Alphabet) else Alphabet(y_alphabet)
        self.n_y = len(self.y_alphabet)
        self.n_pairs = len(self.x_alphabet) * self.n_y
        self.seed = seed
        self.lm = RNNLM(self.n_pairs, d, emb, np.random.default_rng(seed))

    @property
    def state_dim(self):
        return self.lm.d

    def pair_index(self, x, y):
        return np.asarray(x, dtype=np.int64) * self.n_y + np.asarray(y, dtype=np.int64)

    def init_values(self):
        return self.lm.init_values()

    def expand(self, states, x_t):
        states = np.ascontiguousarray(states, dtype=np.float64)
        M = states.shape[0]
        lp = self.lm.log_probs(states)
        lo = x_t * self.n_y
        g = lp[:, lo:lo + self.n_y]
        return self.lm.advance_all(states, np.arange(lo, lo + self.n_y)), g

    def encode_pairs(self, pairs):
        """Symbol pairs -> list of pair-index sequences."""
        out = []
        for x, y in pairs:
            xi, yi = self.x_alphabet.encode(x), self.y_alphabet.encode(y)
            if len(xi) != len(yi):
                raise ValueError("x and y lengths differ")
            out.append(list(self.pair_index(xi, yi)))
        return out

    def perplexity(self, pairs):
        tot, n = self.lm.nll(self.encode_pairs(pairs))
        return math.exp(tot / n)

    def save(self, path, extra=None):
        hp = {"d": self.lm.d, "emb": self.lm.emb_dim, "seed": self.seed,
              "x_alphabet": list(self.x_alphabet), "y_alphabet": list(self.y_alphabet)}
        return save_checkpoint(path, self.lm.state_dict(), "model:" + self.kind, hp, extra)

    @classmethod
    def from_checkpoint(cls, manifest, arrays):
        hp = manifest["hyperparams"]
        m = cls(hp["x_alphabet"], hp["y_alphabet"], hp["d"], hp["emb"], hp.get("seed", 0))
        m.lm.load_state_dict(arrays)
        return m


def pairlm_step(model, s, x_t, y_t):
    return model.step(s, x_t, y_t)


def pairlm_train(model, corpus, dev, max_epochs=3, **kw):
    """Fit a :class:`PairLM` on ``(x, y)`` symbol pairs; at most 3 epochs."""
    if not corpus:
        raise ValueError("empty training corpus")
    return train_lm(model.lm, model.encode_pairs(corpus), model.encode_pairs(dev),
                    max_epochs=min(int(max_epochs), 3), **kw)


# ---------------------------------------------------------------- source LMs

class CharLM:
    """GRU character LM over ``alphabet``; the stop outcome is EOS."""

    kind = "charlm"

    def __init__(self, alphabet, d=32, emb=16, seed=0):
        self.alphabet = alphabet if isinstance(alphabet, Alphabet) else Alphabet(alphabet)
        self.seed = seed
        self.rnn = RNNLM(len(self.alphabet), d, emb, np.random.default_rng(seed))

    @property
    def state_dim(self):
        return self.rnn.d

    @property
    def eos(self):
        return len(self.alphabet)

    def init_values(self):
        return self.rnn.init_values()

    def log_probs(self, states):
        return self.rnn.log_probs(states)

    def advance(self, states, chars):
        return self.rnn.advance(states, chars)

    def score(self, seq):
        return self.rnn.sequence_logprob(list(self.alphabet.encode(seq)))

    def sample(self, rng, max_len=50):
        return self.alphabet.decode(self.rnn.sample(rng, max_len))

    def train(self, corpus, dev, **kw):
        enc = lambda c: [list(self.alphabet.encode(s)) for s in c]
        return train_lm(self.rnn, enc(corpus), enc(dev), **kw)

    def to_arrays(self):
        return self.rnn.state_dict()

    def hyperparams(self):
        return {"type": self.kind, "alphabet": list(self.alphabet), "d": self.rnn.d,
                "emb": self.rnn.emb_dim, "seed": self.seed}

    @classmethod
    def from_arrays(cls, hp, arrays, prefix=""):
        lm = cls(hp["alphabet"], hp["d"], hp["emb"], hp.get("seed", 0))
        lm.rnn.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        return lm


class BigramLM:
    """Fixed bigram character LM; the state is a one-hot of the previous symbol.

    ``table[prev, next]`` holds probabilities with ``prev`` in chars + BOS
    (last row) and ``next`` in chars + EOS (last column).
    """

    kind = "bigram"

    def __init__(self, alphabet, table):
        self.alphabet = alphabet if isinstance(alphabet, Alphabet) else Alphabet(alphabet)
        V = len(self.alphabet)
        self.table = np.asarray(table, dtype=np.float64)
        if self.table.shape != (V + 1, V + 1):
            raise ValueError("bigram table must be (|V|+1) x (|V|+1)")
        if np.abs(self.table.sum(axis=1) - 1.0).max() > 1e-10:
            raise ValueError("bigram rows must sum to 1")
        with np.errstate(divide="ignore"):
            self.log_table = np.log(self.table)

    @classmethod
    def random(cls, alphabet, rng, concentration=0.5, eos_prob=0.2):
        V = len(alphabet)
        t = np.zeros((V + 1, V + 1))
        t[:, :V] = rng.dirichlet(np.full(V, concentration), size=V + 1) * (1.0 - eos_prob)
        t[:, V] = eos_prob
        t[V, V] = 0.0
        t[V, :V] /= t[V, :V].sum()
        return cls(alphabet, t)

    @property
    def state_dim(self):
        return len(self.alphabet) + 1

    @property
    def eos(self):
        return len(self.alphabet)

    def init_values(self):
        v = np.zeros(self.state_dim)
        v[-1] = 1.0
        return v

    def log_probs(self, states):
        return self.log_table[np.argmax(states, axis=1)]

    def advance(self, states, chars):
        out = np.zeros((len(chars), self.state_dim))
        out[np.arange(len(chars)), np.asarray(chars, dtype=np.int64)] = 1.0
        return out

    def score(self, seq):
        prev, total = len(self.alphabet), 0.0
        for c in self.alphabet.encode(seq):
            total += self.log_table[prev, c]
            prev = c
        return float(total + self.log_table[prev, len(self.alphabet)])

    def sample(self, rng, max_len=50):
        prev, out = len(self.alphabet), []
        while len(out) < max_len:
            c = int(kernels.cumulative_inversion(self.table[prev], [rng.random()])[0])
            if c == len(self.alphabet):
                break
            out.append(c)
            prev = c
        return self.alphabet.decode(out)

    def to_arrays(self):
        return {"table": self.table}

    def hyperparams(self):
        return {"type": self.kind, "alphabet": list(self.alphabet)}

    @classmethod
    def from_arrays(cls, hp, arrays, prefix=""):
        return cls(hp["alphabet"], arrays[prefix + "table"])


_LM_TYPES = {"charlm": CharLM, "bigram": BigramLM}


# ---------------------------------------------------------------- source separation

@dataclass(frozen=True)
class InterleaveSpec:
    """An interleaving string over sources ``1..J`` and the source lengths."""

    y: tuple
    lengths: tuple

    def __post_init__(self):
        y = tuple(int(v) for v in self.y)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "lengths", tuple(int(k) for k in self.lengths))
        J = len(self.lengths)
        if any(v < 1 or v > J for v in y):
            raise ValueError(f"interleaving symbols must lie in 1..{J}")
        counts = [y.count(j) for j in range(1, J + 1)]
        if tuple(counts) != self.lengths:
            raise ValueError(f"interleaving counts {counts} do not match lengths {list(self.lengths)}")

    @classmethod
    def from_y(cls, y, J):
        y = tuple(int(v) for v in y)
        return cls(y, tuple(y.count(j) for j in range(1, J + 1)))


def interleave(sources, y):
    """Merge source strings by the interleaving ``y`` (symbols ``1..J``)."""
    spec = InterleaveSpec(y, tuple(len(s) for s in sources))
    pos = [0] * len(sources)
    out = []
    for j in spec.y:
        out.append(sources[j - 1][pos[j - 1]])
        pos[j - 1] += 1
    return "".join(out) if all(isinstance(s, str) for s in sources) else tuple(out)


def extract(x, y, J):
    """Inverse of :func:`interleave`: the J source strings of ``x``."""
    y = tuple(int(v) for v in y)
    if len(x) != len(y):
        raise ValueError("x and y lengths differ")
    parts = [[x[i] for i in range(len(y)) if y[i] == j] for j in range(1, J + 1)]
    return ["".join(p) for p in parts] if isinstance(x, str) else [tuple(p) for p in parts]


class SourceSepModel(ScoringModel):
    """Posterior model of the interleaving string given the merged string.

    The state is ``[h_1 | ... | h_J | done_1 ... done_J]`` in source-id
    order.  Tags are ``"1".."J"`` plus :data:`EOS`; the input ends with EOS,
    whose step scores termination of every source.
    """

    kind = "sourcesep"

    def __init__(self, lm, J, lms=None):
        self.J = int(J)
        if self.J < 1:
            raise ValueError("J must be at least 1")
        self.lms = list(lms) if lms is not None else [lm] * self.J
        if len(self.lms) != self.J:
            raise ValueError("need one LM per source")
        base = self.lms[0]
        if any(m.alphabet != base.alphabet or m.state_dim != base.state_dim for m in self.lms):
            raise ValueError("source LMs must share alphabet and state size")
        self.lm = base
        self.d = base.state_dim
        self.x_alphabet = Alphabet(tuple(base.alphabet) + (EOS,))
        self.y_alphabet = Alphabet(tuple(str(j) for j in range(1, self.J + 1)) + (EOS,))
        self.x_eos = len(base.alphabet)
        self.y_eos = self.J

    @property
    def state_dim(self):
        return self.J * self.d + self.J

    def init_values(self):
        return np.concatenate([m.init_values() for m in self.lms] + [np.zeros(self.J)])

    def _blocks(self, states):
        return [states[:, j * self.d:(j + 1) * self.d] for j in range(self.J)]

    def expand(self, states, x_t):
        states = np.asarray(states, dtype=np.float64)
        M, J, d = states.shape[0], self.J, self.d
        flags = states[:, J * d:]
        blocks = self._blocks(states)
        g = np.full((M, J + 1), -np.inf)
        nxt = np.repeat(states[:, None, :], J + 1, axis=1)
        if x_t == self.x_eos:
            total = np.zeros(M)
            for j in range(J):
                total += self.lms[j].log_probs(blocks[j])[:, self.lms[j].eos]
            live = ~(flags > 0).any(axis=1)
            g[:, J] = np.where(live, total, -np.inf)
            nxt[:, J, J * d:] = 1.0
            return nxt, g
        chars = np.full(M, x_t, dtype=np.int64)
        for j in range(J):
            lp = self.lms[j].log_probs(blocks[j])[:, x_t]
            g[:, j] = np.where(flags[:, j] > 0, -np.inf, lp)
            nxt[:, j, j * d:(j + 1) * d] = self.lms[j].advance(blocks[j], chars)
        return nxt, g

    def check_input(self, x_idx):
        x_idx = np.asarray(x_idx)
        if len(x_idx) == 0 or x_idx[-1] != self.x_eos or (x_idx[:-1] == self.x_eos).any():
            raise InvalidSymbolError("source-separation input must end with exactly one EOS")

    def encode_x(self, chars):
        """Characters (without EOS) -> index sequence ending in EOS."""
        return np.append(self.lm.alphabet.encode(chars), self.x_eos).astype(np.int64)

    def encode_y(self, y):
        """Interleaving over ``1..J`` -> tag indices ending in EOS."""
        return np.append(np.asarray([int(v) - 1 for v in y], dtype=np.int64), self.y_eos)

    def save(self, path, extra=None):
        arrays = {}
        lm_hps = []
        distinct = self.lms if len({id(m) for m in self.lms}) > 1 else [self.lm]
        for i, m in enumerate(distinct):
            arrays.update({f"lm{i}.{k}": v for k, v in m.to_arrays().items()})
            lm_hps.append(m.hyperparams())
        hp = {"J": self.J, "lms": lm_hps}
        return save_checkpoint(path, arrays, "model:" + self.kind, hp, extra)

    @classmethod
    def from_checkpoint(cls, manifest, arrays):
        hp = manifest["hyperparams"]
        lms = [_LM_TYPES[h["type"]].from_arrays(h, arrays, f"lm{i}.") for i, h in enumerate(hp["lms"])]
        if len(lms) == 1:
            return cls(lms[0], hp["J"])
        return cls(lms[0], hp["J"], lms)


def sourcesep_step(model, s, x_t, j):
    """Advance source ``j`` (``"1".."J"`` or int) on character ``x_t``."""
    return model.step(s, x_t, str(j))


def sourcesep_eos_score(model, s):
    """``sum_j log p(EOS | state_j)`` for a composite state."""
    v = np.asarray(s.value if hasattr(s, "value") else s, dtype=np.float64)[None, :]
    blocks = model._blocks(v)
    return float(sum(model.lms[j].log_probs(blocks[j])[0, model.lms[j].eos] for j in range(model.J)))


def posterior_unnorm(model, x, y):
    """``sum_j log p(x^(j))`` for the sources extracted from ``x`` by ``y``.

    Scored source by source with each LM directly (EOS term included).
    """
    if isinstance(y, InterleaveSpec):
        spec = y
    else:
        spec = InterleaveSpec.from_y(y, model.J)
    x = tuple(x)
    if x and x[-1] == EOS:
        x = x[:-1]
    if len(x) != len(spec.y):
        raise ValueError("interleaving length does not match x")
    if spec.lengths != tuple(spec.y.count(j) for j in range(1, model.J + 1)):
        raise ValueError("inconsistent interleaving spec")
    return float(sum(model.lms[j].score(src) for j, src in enumerate(extract(x, spec.y, model.J))))


# ---------------------------------------------------------------- checkpoints

def load_model(path):
    """Load a scoring model saved by ``save`` (pair-LM, source-sep, or OOHMM)."""
    from .oohmm import OohmmModel, OohmmParams

    path = str(path)
    if path.endswith(".oohmm.json"):
        return OohmmModel(OohmmParams.load(path))
    manifest, arrays = load_checkpoint(path)
    kind = manifest["kind"]
    if kind == "model:pairlm":
        return PairLM.from_checkpoint(manifest, arrays)
    if kind == "model:sourcesep":
        return SourceSepModel.from_checkpoint(manifest, arrays)
    raise ValueError(f"checkpoint kind {kind!r} is not a scoring model")
