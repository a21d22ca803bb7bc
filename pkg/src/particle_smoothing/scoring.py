"""Incremental stateful scoring models.

A scoring model assigns ``G_T = sum_t g(s_{t-1}, x_t, y_t)`` to an aligned
pair of sequences, where the state evolves as ``s_t = f(s_{t-1}, x_t, y_t)``.
Conditional probabilities are ``p(y | x) ∝ exp(G_T)``.

Concrete models work on batches of state vectors: a state is a float
vector of fixed length ``state_dim``, and :meth:`ScoringModel.expand` scores
every tag for every particle at once.  The symbol-level methods
(:meth:`init_state`, :meth:`step`, :meth:`score_sequence`) are thin wrappers
used by tests, oracles and the CLI.
"""
from __future__ import annotations

import abc
import itertools
from dataclasses import dataclass, field

import numpy as np

EOS = "<eos>"
BOS = "<bos>"
ENUMERATION_LIMIT = 10 ** 6


class InvalidSymbolError(ValueError):
    pass


class EnumerationTooLargeError(ValueError):
    pass


class Alphabet:
    """Ordered finite set of symbols with index lookup."""

    def __init__(self, symbols):
        symbols = tuple(symbols)
        if len(set(symbols)) != len(symbols):
            raise ValueError("alphabet symbols must be unique")
        self.symbols = symbols
        self._index = {s: i for i, s in enumerate(symbols)}

    def __len__(self):
        return len(self.symbols)

    def __iter__(self):
        return iter(self.symbols)

    def __getitem__(self, i):
        return self.symbols[i]

    def __contains__(self, s):
        return s in self._index

    def __eq__(self, other):
        return isinstance(other, Alphabet) and other.symbols == self.symbols

    def __hash__(self):
        return hash(self.symbols)

    def __repr__(self):
        return f"Alphabet({list(self.symbols)!r})"

    def index(self, symbol):
        try:
            return self._index[symbol]
        except KeyError:
            raise InvalidSymbolError(f"symbol {symbol!r} not in alphabet") from None

    def encode(self, seq):
        return np.array([self.index(s) for s in seq], dtype=np.int64)

    def decode(self, idx):
        return tuple(self.symbols[int(i)] for i in idx)


@dataclass(frozen=True)
class SequencePair:
    x: tuple
    y: tuple

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(self.x))
        object.__setattr__(self, "y", tuple(self.y))
        if len(self.x) != len(self.y):
            raise ValueError(f"|x|={len(self.x)} differs from |y|={len(self.y)}")

    def __len__(self):
        return len(self.x)


@dataclass(frozen=True, eq=False)
class ScoringState:
    """A model state value at prefix length ``t`` (immutable copy)."""

    value: np.ndarray = field(repr=False)
    t: int = 0

    def __post_init__(self):
        v = np.array(self.value, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "value", v)

    def __eq__(self, other):
        return (isinstance(other, ScoringState) and self.t == other.t
                and np.array_equal(self.value, other.value))


@dataclass(frozen=True)
class PrefixScore:
    G: float = 0.0
    t: int = 0

    def extend(self, local_score):
        return PrefixScore(self.G + local_score, self.t + 1)


class ScoringModel(abc.ABC):
    """Abstract incremental scoring model over enumerable tag alphabets."""

    x_alphabet: Alphabet
    y_alphabet: Alphabet

    @property
    @abc.abstractmethod
    def state_dim(self) -> int:
        ...

    @abc.abstractmethod
    def init_values(self) -> np.ndarray:
        """The initial state ``s_0`` as a vector."""

    @abc.abstractmethod
    def expand(self, states, x_t):
        """Score every tag for a batch of states.

        Parameters
        ----------
        states : ndarray, shape (M, state_dim)
        x_t : int
            Index of the current input symbol.

        Returns
        -------
        next_states : ndarray, shape (M, |Y|, state_dim)
        local_scores : ndarray, shape (M, |Y|)
            ``g(s, x_t, y)``; ``-inf`` marks impossible tags.
        """

    def step_values(self, states, x_t, y_t):
        """Advance each state by its own tag; returns ``(next (M, D), scores (M,))``."""
        nxt, g = self.expand(states, x_t)
        rows = np.arange(len(states))
        y_t = np.asarray(y_t, dtype=np.int64)
        return nxt[rows, y_t], g[rows, y_t]

    def check_input(self, x_idx):
        """Hook for models with constraints on the input string."""

    def encode_x(self, seq):
        return self.x_alphabet.encode(seq)

    def encode_y(self, seq):
        return self.y_alphabet.encode(seq)

    def decode_y(self, idx):
        return self.y_alphabet.decode(idx)

    # symbol-level contract

    def init_state(self):
        return ScoringState(self.init_values(), 0)

    def step(self, s, x_t, y_t):
        xi = self.x_alphabet.index(x_t)
        yi = self.y_alphabet.index(y_t)
        nxt, g = self.step_values(s.value[None, :], xi, np.array([yi]))
        return ScoringState(nxt[0], s.t + 1), float(g[0])

    def score_sequence(self, pair):
        s = self.init_state()
        total = PrefixScore()
        for xt, yt in zip(pair.x, pair.y):
            s, g = self.step(s, xt, yt)
            total = total.extend(g)
        return total.G

    def score_indices(self, x_idx, y_idx):
        """``G_T`` for index-encoded sequences (batched fold over steps)."""
        s = self.init_values()[None, :]
        G = 0.0
        for xt, yt in zip(x_idx, y_idx):
            s, g = self.step_values(s, int(xt), np.array([int(yt)]))
            G += float(g[0])
        return G


def enumerate_scores(model, x_idx, limit=ENUMERATION_LIMIT):
    """All tag sequences for ``x`` with their ``G_T`` (brute force).

    Breadth-first expansion through :meth:`ScoringModel.expand`; returns
    ``(paths (N, T), G (N,))`` in lexicographic tag order.
    """
    x_idx = np.asarray(x_idx, dtype=np.int64)
    T = len(x_idx)
    Y = len(model.y_alphabet)
    if Y ** T > limit:
        raise EnumerationTooLargeError(f"|Y|^T = {Y}^{T} exceeds {limit}")
    states = model.init_values()[None, :]
    G = np.zeros(1)
    paths = np.zeros((1, 0), dtype=np.int64)
    for t in range(T):
        nxt, g = model.expand(states, int(x_idx[t]))
        n = len(states)
        states = nxt.reshape(n * Y, -1)
        G = (G[:, None] + g).reshape(-1)
        paths = np.concatenate(
            [np.repeat(paths, Y, axis=0), np.tile(np.arange(Y), n)[:, None]], axis=1)
    return paths, G


def all_paths(Y, T):
    """Every length-``T`` sequence over ``range(Y)`` in lexicographic order."""
    if T == 0:
        return np.zeros((1, 0), dtype=np.int64)
    return np.array(list(itertools.product(range(Y), repeat=T)), dtype=np.int64)
