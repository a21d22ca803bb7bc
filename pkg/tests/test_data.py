import collections
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from particle_smoothing import data
from particle_smoothing.models import interleave
from particle_smoothing.oohmm import OohmmParams


# ---------------------------------------------------------------- last-char


def test_lastchar_marker_one_copies():
    x, y = data.lastchar_pair(("K", "AU", "CH"), "1")
    assert x == ("K", "AU", "CH", "1")
    assert y == x


def test_lastchar_marker_zero_lowercases():
    x, y = data.lastchar_pair(("K", "AU", "CH"), "0")
    assert x == ("K", "AU", "CH", "0")
    assert y == ("k", "au", "ch", "0")


def test_lastchar_rejects_caseless_and_lowercase_symbols():
    with pytest.raises(data.CaseMappingError):
        data.lastchar_pair(("K", "7"), "1")
    with pytest.raises(data.CaseMappingError):
        data.lastchar_pair(("k",), "0")
    with pytest.raises(ValueError):
        data.lastchar_pair(("K",), "2")


def test_lastchar_markers_are_fair():
    base = data.base_corpus(4000, seed=3)
    pairs = data.gen_lastchar(base, seed=4)
    ones = sum(x[-1] == "1" for x, _ in pairs)
    assert stats.binomtest(ones, len(pairs), 0.5).pvalue > 0.001


def test_lastchar_tags_follow_the_marker():
    for x, y in data.gen_lastchar(data.base_corpus(200, seed=1), seed=2):
        body = x[:-1]
        assert y[-1] == x[-1]
        assert y[:-1] == (body if x[-1] == "1" else tuple(t.lower() for t in body))


def test_lastchar_alphabets_cover_corpus():
    xa, ya = data.lastchar_alphabets()
    splits, info = data.build_lastchar(n=60, sizes=(40, 5, 5, 10), seed=2)
    for pairs in splits.values():
        for x, y in pairs:
            xa.encode(x)
            ya.encode(y)
    assert info["y_alphabet"] == list(ya)


def test_base_corpus_lengths():
    for seq in data.base_corpus(300, seed=5, min_len=2, max_len=4):
        assert 2 <= len(seq) <= 4
        assert all(t in data.PHONEMES for t in seq)


# ---------------------------------------------------------------- interleaving


def test_interleavings_are_uniform():
    rng = np.random.default_rng(11)
    n = 100_000
    counts = collections.Counter(data.urn_interleaving((2, 1), rng) for _ in range(n))
    assert set(counts) == {(1, 1, 2), (1, 2, 1), (2, 1, 1)}
    obs = [counts[k] for k in sorted(counts)]
    assert stats.chisquare(obs, [n / 3] * 3).pvalue > 0.001


def test_single_source_interleaving():
    assert data.urn_interleaving((4,), np.random.default_rng(0)) == (1, 1, 1, 1)
    out = data.gen_interleaved(["abc", "de"], 1, 5, seed=0)
    for x, y, srcs in out:
        assert x == srcs[0] and set(y) == {1}


def test_interleaving_example():
    assert "".join(interleave(["Foo", "bar"], (1, 2, 2, 1, 1, 2))) == "Fbaoor"


def test_gen_interleaved_round_trip():
    for x, y, srcs in data.gen_interleaved(["ab", "cde", "f"], 2, 50, seed=3):
        assert tuple(interleave(srcs, y)) == x
        assert [y.count(j) for j in (1, 2)] == [len(s) for s in srcs]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=3))
def test_enumerated_interleavings_match_count(lengths):
    all_y = data.enumerate_interleavings(lengths)
    assert len(all_y) == len(set(all_y)) == data.count_interleavings(lengths)


def test_gen_interleaved_validates_J():
    with pytest.raises(ValueError):
        data.gen_interleaved(["ab"], 0, 1)


# ---------------------------------------------------------------- OOHMM corpora


def test_deterministic_chain_corpus():
    trans = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    emit = np.zeros((3, 2, 2))
    emit[0, 0, 0] = emit[1, 0, 1] = emit[2, 1, 0] = 1.0
    params = OohmmParams(trans, emit, 0)
    for x, y in data.gen_oohmm_corpus(params, 5, 4, seed=1, min_T=4):
        assert x == ("0", "1", "0", "1")
        assert y == ("1", "0", "1", "0")


def test_oohmm_first_pair_frequencies():
    params = OohmmParams.random(np.random.default_rng(2), k=2, n_x=2, n_y=2)
    n = 20_000
    pairs = data.gen_oohmm_corpus(params, n, 1, seed=9)
    counts = collections.Counter((x[0], y[0]) for x, y in pairs)
    # p(x_1, y_1) = sum_u trans[bos, u] emit[u, x, y]
    p = np.einsum("u,uxy->xy", params.trans[params.bos_index], params.emit)
    exp, obs = [], []
    for xi, xs in enumerate(params.x_alphabet):
        for yi, ys in enumerate(params.y_alphabet):
            exp.append(n * p[xi, yi])
            obs.append(counts[(xs, ys)])
    assert stats.chisquare(obs, exp).pvalue > 0.001


def test_oohmm_corpus_lengths():
    params = data.segment_oohmm()
    for x, y in data.gen_oohmm_corpus(params, 100, 7, seed=0, min_T=3):
        assert 3 <= len(x) == len(y) <= 7


def test_segment_oohmm_tags_match_end_markers():
    params = data.segment_oohmm(fidelity=1.0)
    for x, y in data.gen_oohmm_corpus(params, 50, 20, seed=4, min_T=5):
        seg = []
        for xt, yt in zip(x, y):
            seg.append(yt)
            if xt in ("e0", "e1"):
                assert set(seg) == {xt[1]}
                seg = []


# ---------------------------------------------------------------- splits and files


def test_split_four_is_disjoint_and_complete():
    out = data.split_four(range(101), seed=5)
    got = sorted(i for part in out.values() for i in part)
    assert got == list(range(101))
    assert [len(out[k]) for k in data.SPLITS] == [80, 5, 5, 11]


def test_split_validation():
    with pytest.raises(ValueError):
        data.split_four(range(10), (0.5, 0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        data.split_sizes(range(10), (8, 2, 1, 0))


def test_splits_are_reproducible():
    a = data.split_sizes(range(50), (30, 5, 5, 10), seed=7)
    b = data.split_sizes(range(50), (30, 5, 5, 10), seed=7)
    c = data.split_sizes(range(50), (30, 5, 5, 10), seed=8)
    assert a == b and a != c


def test_tsv_round_trip(tmp_path):
    pairs = [(("a", "b"), ("1", "2")), ((), ())]
    data.write_tsv(tmp_path / "c.tsv", pairs)
    assert data.read_tsv(tmp_path / "c.tsv") == pairs
    assert data.read_inputs(tmp_path / "c.tsv") == [("a", "b"), ()]


def test_build_outputs_are_byte_identical(tmp_path):
    for d in ("a", "b"):
        splits, info = data.build_lastchar(n=40, sizes=(30, 3, 3, 4), seed=1)
        data.write_splits(tmp_path / d, splits, "lastchar", 1, info["params"])
    for name in [f"{s}.tsv" for s in data.SPLITS] + ["manifest.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert data.read_manifest(tmp_path / "a")["sizes"] == {"train": 30, "dev1": 3, "dev2": 3, "test": 4}
    assert data.read_splits(tmp_path / "a") == splits


def test_build_oohmm_shapes():
    splits, info, params = data.build_oohmm(n=40, sizes=(30, 3, 3, 4), min_T=4, max_T=6)
    assert [len(splits[k]) for k in data.SPLITS] == [30, 3, 3, 4]
    assert info["x_alphabet"] == list(params.x_alphabet)


def test_build_sourcesep_and_sources_file(tmp_path):
    splits, sources, info, lm = data.build_sourcesep(n=30, sizes=(20, 3, 3, 4), seed=2)
    for name in data.SPLITS:
        for (x, y), srcs in zip(splits[name], sources[name]):
            assert tuple(interleave(srcs, tuple(int(v) for v in y))) == x
    data.write_sources(tmp_path, sources)
    assert data.read_sources(tmp_path / "train.sources.tsv") == [list(s) for s in sources["train"]]
    with pytest.raises(ValueError):
        data.build_sourcesep(n=10, sizes=(5, 1, 1, 1), source_lm="trigram")


def test_subseeds_are_distinct_and_stable():
    a = data.subseeds(3, 4)
    assert len(set(a)) == 4 and a == data.subseeds(3, 4)
    assert math.isfinite(a[0])
