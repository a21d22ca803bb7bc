"""Synthetic corpora: last-char, interleaved sources, OOHMM-generated tagging.

Corpora are lists of ``(x, y)`` symbol tuples.  On disk they are UTF-8 TSV
files with one sequence per line, ``x`` and ``y`` in two tab-separated
columns of space-separated symbols, next to a JSON manifest recording the
generator, its parameters and the seed.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import kernels
from .models import interleave
from .oohmm import OohmmParams
from .scoring import Alphabet

SPLITS = ("train", "dev1", "dev2", "test")
DEFAULT_FRACTIONS = (0.8, 0.05, 0.05, 0.1)
MARKERS = ("0", "1")


class CaseMappingError(ValueError):
    pass


# ---------------------------------------------------------------- splitting and files

def split_four(items, fractions=DEFAULT_FRACTIONS, seed=0):
    """Shuffle and cut into train / dev1 / dev2 / test (disjoint by position)."""
    items = list(items)
    if abs(sum(fractions) - 1.0) > 1e-9 or len(fractions) != 4:
        raise ValueError("need four fractions summing to 1")
    order = np.random.default_rng(seed).permutation(len(items))
    cuts = np.floor(np.cumsum(fractions) * len(items) + 1e-9).astype(int)
    cuts[-1] = len(items)
    out, lo = {}, 0
    for name, hi in zip(SPLITS, cuts):
        out[name] = [items[i] for i in order[lo:hi]]
        lo = hi
    return out


def split_sizes(items, sizes, seed=0):
    """Shuffle and cut into splits of the given absolute sizes."""
    items = list(items)
    if sum(sizes) > len(items):
        raise ValueError("split sizes exceed corpus size")
    order = np.random.default_rng(seed).permutation(len(items))
    out, lo = {}, 0
    for name, n in zip(SPLITS, sizes):
        out[name] = [items[i] for i in order[lo:lo + n]]
        lo += n
    return out


def write_tsv(path, pairs):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y in pairs:
            fh.write(" ".join(x) + "\t" + " ".join(y) + "\n")


def read_tsv(path):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            x = tuple(cols[0].split()) if cols[0] else ()
            y = tuple(cols[1].split()) if len(cols) > 1 and cols[1] else ()
            pairs.append((x, y))
    return pairs


def read_inputs(path):
    """Only the ``x`` column of a TSV corpus."""
    return [x for x, _ in read_tsv(path)]


def write_manifest(path, generator, seed, params, sizes, **extra):
    doc = {"generator": generator, "seed": int(seed), "params": params, "sizes": sizes}
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def write_splits(out_dir, splits, generator, seed, params, **extra):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_tsv(out_dir / f"{name}.tsv", splits.get(name, []))
    return write_manifest(out_dir / "manifest.json", generator, seed, params,
                          {k: len(splits.get(k, [])) for k in SPLITS}, **extra)


def read_splits(data_dir):
    data_dir = Path(data_dir)
    return {name: read_tsv(data_dir / f"{name}.tsv") for name in SPLITS if (data_dir / f"{name}.tsv").exists()}


# ---------------------------------------------------------------- last-char

PHONEMES = ("AA", "AE", "AH", "AU", "B", "CH", "D", "EH", "IY", "K", "N", "S", "T", "UW")


def base_corpus(n, seed=0, inventory=PHONEMES, min_len=2, max_len=6, concentration=0.3):
    """Token sequences from a random bigram chain over an uppercase inventory."""
    rng = np.random.default_rng(seed)
    V = len(inventory)
    trans = rng.dirichlet(np.full(V, concentration), size=V + 1)
    out = []
    for _ in range(n):
        L = int(rng.integers(min_len, max_len + 1))
        prev, seq = V, []
        for _ in range(L):
            c = int(kernels.cumulative_inversion(trans[prev], [rng.random()])[0])
            seq.append(inventory[c])
            prev = c
        out.append(tuple(seq))
    return out


def lowercase_token(tok):
    if tok in MARKERS:
        return tok
    if tok.lower() == tok.upper():
        raise CaseMappingError(f"symbol {tok!r} has no case mapping")
    return tok.lower()


def lastchar_pair(seq, marker):
    """``marker`` 1: identical copy; 0: lowercased copy (markers unchanged)."""
    seq = tuple(seq)
    if marker not in MARKERS:
        raise ValueError("marker must be '0' or '1'")
    for tok in seq:
        lowercase_token(tok)
        if tok != tok.upper():
            raise CaseMappingError(f"base symbol {tok!r} is not uppercase")
    x = seq + (marker,)
    y = x if marker == "1" else tuple(lowercase_token(t) for t in x)
    return x, y


def gen_lastchar(corpus, seed=0):
    """Append a fair-coin marker to every sequence and build its tagging."""
    rng = np.random.default_rng(seed)
    coins = rng.random(len(corpus)) < 0.5
    return [lastchar_pair(seq, "1" if c else "0") for seq, c in zip(corpus, coins)]


def lastchar_alphabets(inventory=PHONEMES):
    xs = tuple(inventory) + MARKERS
    ys = tuple(inventory) + tuple(t.lower() for t in inventory) + MARKERS
    return Alphabet(xs), Alphabet(ys)


# ---------------------------------------------------------------- interleaving

def urn_interleaving(lengths, rng):
    """Uniform interleaving string over ``1..J`` with the given source lengths.

    At each position source ``j`` is chosen with probability
    ``remaining_j / total_remaining``.
    """
    remaining = np.array(lengths, dtype=np.float64)
    total = int(remaining.sum())
    y = []
    for _ in range(total):
        j = int(kernels.cumulative_inversion(remaining / remaining.sum(), [rng.random()])[0])
        y.append(j + 1)
        remaining[j] -= 1
    return tuple(y)


def gen_interleaved(source, J, n, seed=0, max_len=12, min_len=1):
    """``n`` merged strings with gold interleavings.

    ``source`` is an LM with ``sample(rng, max_len)`` or a list of strings
    to draw from uniformly.  Returns ``(x, y, sources)`` triples where ``x``
    is a tuple of characters and ``y`` a tuple of source ids ``1..J``.
    """
    if J < 1:
        raise ValueError("J must be at least 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        srcs = []
        for _ in range(J):
            while True:
                if hasattr(source, "sample"):
                    s = tuple(source.sample(rng, max_len))
                else:
                    s = tuple(source[int(rng.integers(len(source)))])
                if min_len <= len(s) <= max_len:
                    break
            srcs.append(s)
        y = urn_interleaving([len(s) for s in srcs], rng)
        out.append((tuple(interleave(srcs, y)), y, srcs))
    return out


def enumerate_interleavings(lengths):
    """All distinct interleaving strings for the given source lengths."""
    out = []

    def rec(rem, prefix):
        if not any(rem):
            out.append(tuple(prefix))
            return
        for j, r in enumerate(rem):
            if r:
                rem[j] -= 1
                prefix.append(j + 1)
                rec(rem, prefix)
                prefix.pop()
                rem[j] += 1

    rec(list(lengths), [])
    return out


def count_interleavings(lengths):
    n = math.factorial(sum(lengths))
    for k in lengths:
        n //= math.factorial(k)
    return n


# ---------------------------------------------------------------- OOHMM corpora

def gen_oohmm_corpus(params, n, max_T, seed=0, min_T=1):
    """Ancestral samples ``(x, y)`` with lengths uniform in ``[min_T, max_T]``."""
    rng = np.random.default_rng(seed)
    k, nx, ny = params.emit.shape
    flat = params.emit.reshape(k, nx * ny)
    out = []
    for _ in range(n):
        L = int(rng.integers(min_T, max_T + 1))
        u = params.bos_index
        xs, ys = [], []
        for _ in range(L):
            u = int(kernels.cumulative_inversion(params.trans[u], [rng.random()])[0])
            e = int(kernels.cumulative_inversion(flat[u], [rng.random()])[0])
            xs.append(params.x_alphabet[e // ny])
            ys.append(params.y_alphabet[e % ny])
        out.append((tuple(xs), tuple(ys)))
    return out


def segment_oohmm(p_end=0.6, fidelity=0.95):
    """OOHMM whose tags depend on a segment type revealed only at segment end.

    States: BOS, then ``(type, body)`` and ``(type, end)`` for types 0 and 1.
    Body states emit ``a`` or ``b`` (uniformly) with tag equal to the type
    with probability ``fidelity``; an end state emits ``e<type>`` tagged with
    the type.  After an end state a new segment type is chosen uniformly.
    """
    # state ids: 0 BOS, 1 body0, 2 end0, 3 body1, 4 end1
    k = 5
    trans = np.zeros((k, k))
    trans[0, 1] = trans[0, 3] = 0.5
    for body, end in ((1, 2), (3, 4)):
        trans[body, body] = 1.0 - p_end
        trans[body, end] = p_end
        trans[end, 1] = trans[end, 3] = 0.5
    xs, ys = ("a", "b", "e0", "e1"), ("0", "1")
    emit = np.zeros((k, 4, 2))
    emit[0, :, :] = 1.0 / 8.0
    for tau, (body, end) in enumerate(((1, 2), (3, 4))):
        for xi in (0, 1):
            emit[body, xi, tau] = 0.5 * fidelity
            emit[body, xi, 1 - tau] = 0.5 * (1.0 - fidelity)
        emit[end, 2 + tau, tau] = 1.0
    return OohmmParams(trans, emit, 0, Alphabet(xs), Alphabet(ys))


# ---------------------------------------------------------------- task builders

def subseeds(seed, n):
    """``n`` independent integer seeds derived from ``seed``."""
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def build_lastchar(n=11000, sizes=(10000, 300, 300, 400), seed=0, min_len=2, max_len=6,
                   concentration=0.3, inventory=PHONEMES):
    """Last-char corpus split four ways; returns ``(splits, info)``."""
    s_base, s_coin, s_split = subseeds(seed, 3)
    base = base_corpus(n, s_base, inventory, min_len, max_len, concentration)
    splits = split_sizes(gen_lastchar(base, s_coin), sizes, s_split)
    xa, ya = lastchar_alphabets(inventory)
    info = {"task": "lastchar", "x_alphabet": list(xa), "y_alphabet": list(ya),
            "params": {"n": n, "min_len": min_len, "max_len": max_len, "concentration": concentration,
                       "inventory": list(inventory)}}
    return splits, info


def build_oohmm(n=3000, sizes=(2500, 100, 100, 300), seed=0, min_T=10, max_T=16, p_end=0.6, fidelity=0.95):
    """Tagging corpus sampled from :func:`segment_oohmm`; returns ``(splits, info, params)``."""
    s_gen, s_split = subseeds(seed, 2)
    params = segment_oohmm(p_end, fidelity)
    splits = split_sizes(gen_oohmm_corpus(params, n, max_T, s_gen, min_T), sizes, s_split)
    info = {"task": "oohmm", "x_alphabet": list(params.x_alphabet), "y_alphabet": list(params.y_alphabet),
            "params": {"n": n, "min_T": min_T, "max_T": max_T, "p_end": p_end, "fidelity": fidelity}}
    return splits, info, params


def build_sourcesep(n=600, sizes=(400, 50, 50, 100), seed=0, J=2, max_len=6, min_len=1, n_chars=6,
                    source_lm="bigram", vocab_size=2000, lm_kwargs=None):
    """Interleaved strings from a source LM; returns ``(splits, sources, info, lm)``.

    ``source_lm="bigram"`` draws sources from a random bigram table;
    ``"charlm"`` first trains a character GRU on a vocabulary drawn from that
    table and draws sources from the GRU.
    """
    from .models import BigramLM, CharLM

    s_lm, s_vocab, s_gen, s_split = subseeds(seed, 4)
    chars = tuple("abcdefghijklmnopqrstuvwxyz"[:n_chars])
    lm = BigramLM.random(chars, np.random.default_rng(s_lm))
    if source_lm == "charlm":
        rng = np.random.default_rng(s_vocab)
        vocab = []
        while len(vocab) < vocab_size:
            w = tuple(lm.sample(rng, max_len))
            if min_len <= len(w) <= max_len:
                vocab.append(w)
        kw = dict(lm_kwargs or {})
        char_lm = CharLM(chars, kw.pop("d", 32), kw.pop("emb", 16), seed=s_lm % (2 ** 31))
        cut = max(1, len(vocab) // 10)
        char_lm.train(vocab[cut:], vocab[:cut], **kw)
        lm = char_lm
    elif source_lm != "bigram":
        raise ValueError(f"unknown source LM {source_lm!r}")
    triples = gen_interleaved(lm, J, n, s_gen, max_len, min_len)
    order = split_sizes(range(n), sizes, s_split)
    splits = {k: [(triples[i][0], tuple(str(v) for v in triples[i][1])) for i in idx] for k, idx in order.items()}
    sources = {k: [triples[i][2] for i in idx] for k, idx in order.items()}
    info = {"task": "sourcesep", "x_alphabet": list(chars), "y_alphabet": [str(j) for j in range(1, J + 1)],
            "params": {"n": n, "J": J, "max_len": max_len, "min_len": min_len, "n_chars": n_chars,
                       "source_lm": source_lm, "vocab_size": vocab_size}}
    return splits, sources, info, lm


def write_sources(out_dir, sources):
    """``{split}.sources.tsv``: one line per example, one column per source."""
    out_dir = Path(out_dir)
    for name, rows in sources.items():
        with open(out_dir / f"{name}.sources.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for srcs in rows:
                fh.write("\t".join(" ".join(s) for s in srcs) + "\n")


def read_sources(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                out.append([tuple(col.split()) for col in line.split("\t")])
    return out


def read_manifest(data_dir):
    return json.loads((Path(data_dir) / "manifest.json").read_text())
