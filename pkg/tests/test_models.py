import itertools
import math

import numpy as np
import pytest

from particle_smoothing.autodiff import tensor as T
from particle_smoothing.data import enumerate_interleavings
from particle_smoothing.models import (
    BigramLM,
    CharLM,
    InterleaveSpec,
    PairLM,
    SourceSepModel,
    extract,
    interleave,
    load_model,
    pairlm_step,
    pairlm_train,
    posterior_unnorm,
    sourcesep_eos_score,
    sourcesep_step,
)
from particle_smoothing.scoring import EOS, SequencePair, all_paths, enumerate_scores

CHARS = ("a", "b")


def hand_bigram():
    # rows: prev a, prev b, BOS; columns: a, b, EOS
    table = np.array([[0.1, 0.6, 0.3],
                      [0.5, 0.3, 0.2],
                      [0.7, 0.3, 0.0]])
    return BigramLM(CHARS, table)


@pytest.fixture
def pairlm():
    return PairLM(["a", "b"], ["0", "1"], d=5, emb=3, seed=4)


# ---------------------------------------------------------------- pair-LM


def test_pairlm_local_normalization_with_stop(pairlm, rng):
    states = rng.normal(size=(6, pairlm.state_dim))
    lp = pairlm.lm.log_probs(states)
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-12)
    # the pair scores exclude the stop outcome
    g = np.concatenate([pairlm.expand(states, xi)[1] for xi in range(2)], axis=1)
    np.testing.assert_allclose(np.exp(g).sum(axis=1) + np.exp(lp[:, -1]), 1.0, atol=1e-12)


def test_pairlm_enumerated_mass_is_survival_probability(pairlm):
    lm = pairlm.lm
    n_sym = pairlm.n_pairs
    for Tn in (1, 2, 3):
        total = sum(np.exp(enumerate_scores(pairlm, x)[1]).sum() for x in all_paths(2, Tn))
        # independent route: 1 - P(stop before Tn), scored one symbol at a time
        stopped = sum(math.exp(lm.sequence_logprob(list(seq)))
                      for L in range(Tn) for seq in itertools.product(range(n_sym), repeat=L))
        assert total == pytest.approx(1.0 - stopped, abs=1e-12)


def test_pairlm_step_matches_expand(pairlm):
    s = pairlm.init_state()
    s1, g = pairlm_step(pairlm, s, "b", "1")
    nxt, gs = pairlm.expand(s.value[None, :], 1)
    assert g == gs[0, 1]
    np.testing.assert_array_equal(s1.value, nxt[0, 1])
    with pytest.raises(ValueError):
        pairlm_step(pairlm, s, "c", "1")


def test_advance_all_matches_per_symbol_advance(pairlm, rng):
    states = rng.normal(size=(4, pairlm.state_dim))
    syms = np.array([0, 3, 1])
    allv = pairlm.lm.advance_all(states, syms)
    for j, c in enumerate(syms):
        one = pairlm.lm.advance(states, np.full(4, c))
        np.testing.assert_allclose(allv[:, j], one, atol=1e-13)


def test_supervised_gradient_finite_difference(pairlm, rng):
    seqs = pairlm.encode_pairs([(("a", "b", "b"), ("1", "0", "1")), (("b",), ("0",))])
    params = pairlm.lm.parameters()
    with T.Tape() as tape:
        loss, _ = pairlm.lm.batch_nll(seqs)
    grads = tape.backward(loss, params)
    h = 1e-6
    for p in params:
        for _ in range(3):
            idx = tuple(int(rng.integers(n)) for n in p.value.shape)
            old = p.value[idx]
            p.value[idx] = old + h
            up = float(pairlm.lm.batch_nll(seqs)[0].value)
            p.value[idx] = old - h
            down = float(pairlm.lm.batch_nll(seqs)[0].value)
            p.value[idx] = old
            fd = (up - down) / (2 * h)
            assert grads[p][idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_pairlm_train_caps_epochs_at_three(pairlm):
    corpus = [(("a", "b"), ("1", "0"))] * 8
    hist = pairlm_train(pairlm, corpus, corpus, max_epochs=10, patience=10)
    assert len(hist) == 3


def test_pairlm_train_rejects_empty(pairlm):
    with pytest.raises(ValueError):
        pairlm_train(pairlm, [], [])


def test_pairlm_repeated_pair_perplexity_falls(pairlm):
    pair = (("a", "b", "a"), ("1", "0", "0"))
    hist = pairlm_train(pairlm, [pair] * 64, [pair], max_epochs=3, lr=0.05, batch_size=4, patience=5)
    ppl = [h[2] for h in hist]
    assert ppl[0] > ppl[1] > ppl[2]
    assert ppl[-1] < 1.2


def test_pairlm_first_epoch_loss_decreases():
    m = PairLM(["a", "b"], ["0", "1"], d=8, emb=4, seed=1)
    rng = np.random.default_rng(0)
    corpus = [(tuple(rng.choice(["a", "b"], 4)), tuple(rng.choice(["0", "1"], 4))) for _ in range(200)]
    before = m.perplexity(corpus)
    pairlm_train(m, corpus, corpus, max_epochs=1, batch_size=8)
    assert m.perplexity(corpus) < before


def test_pairlm_checkpoint_round_trip(tmp_path, pairlm):
    pairlm.save(tmp_path / "m")
    back = load_model(tmp_path / "m.json")
    x, y = ("a", "b"), ("0", "1")
    assert back.score_sequence(SequencePair(x, y)) == pairlm.score_sequence(SequencePair(x, y))


# ---------------------------------------------------------------- interleaving


def test_foboar_example():
    assert interleave(["Foo", "Bar"], [1, 1, 2, 1, 2, 2]) == "FoBoar"
    assert extract("FoBoar", [1, 1, 2, 1, 2, 2], 2) == ["Foo", "Bar"]


def test_interleave_spec_validation():
    with pytest.raises(ValueError):
        InterleaveSpec((1, 1, 2), (1, 2))
    with pytest.raises(ValueError):
        InterleaveSpec((1, 3), (1, 1))


# ---------------------------------------------------------------- source separation


def test_single_source_reduces_to_lm_score():
    lm = hand_bigram()
    m = SourceSepModel(lm, 1)
    x = ("a", "b", "b")
    G = m.score_indices(m.encode_x(x), m.encode_y("111"))
    assert G == pytest.approx(lm.score(x), abs=1e-14)
    expected = math.log(0.7) + math.log(0.6) + math.log(0.3) + math.log(0.2)
    assert G == pytest.approx(expected, abs=1e-14)


def test_score_equals_sum_of_source_scores():
    lm = hand_bigram()
    m = SourceSepModel(lm, 2)
    x, y = ("a", "b", "a", "b"), (1, 2, 2, 1)
    G = m.score_indices(m.encode_x(x), m.encode_y(y))
    direct = lm.score(("a", "b")) + lm.score(("b", "a"))
    assert G == pytest.approx(direct, abs=1e-13)
    assert posterior_unnorm(m, x, y) == pytest.approx(G, abs=1e-13)


def test_sourcesep_step_advances_only_its_source():
    lm = hand_bigram()
    m = SourceSepModel(lm, 2)
    s0 = m.init_state()
    s1, g = sourcesep_step(m, s0, "a", 2)
    assert g == pytest.approx(math.log(0.7))
    d = lm.state_dim
    np.testing.assert_array_equal(s1.value[:d], s0.value[:d])
    assert s1.value[d] == 1.0


def test_terminated_source_cannot_advance():
    m = SourceSepModel(hand_bigram(), 1)
    s = m.init_state()
    s, _ = m.step(s, "a", "1")
    s, g = m.step(s, EOS, EOS)
    assert np.isfinite(g)
    _, g2 = m.step(s, "a", "1")
    assert g2 == -np.inf


def test_eos_score_single_source():
    lm = hand_bigram()
    m = SourceSepModel(lm, 1)
    s, _ = m.step(m.init_state(), "b", "1")
    assert sourcesep_eos_score(m, s) == pytest.approx(math.log(0.2), abs=1e-15)


def test_eos_score_certain_termination_is_zero():
    table = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.0]])
    m = SourceSepModel(BigramLM(CHARS, table), 2)
    s = m.init_state()
    s, _ = m.step(s, "a", "1")
    s, _ = m.step(s, "b", "2")
    assert sourcesep_eos_score(m, s) == 0.0


def test_eos_score_two_sources_hand_value():
    m = SourceSepModel(hand_bigram(), 2)
    s = m.init_state()
    s, _ = m.step(s, "a", "1")
    s, _ = m.step(s, "b", "2")
    assert sourcesep_eos_score(m, s) == pytest.approx(math.log(0.3) + math.log(0.2), abs=1e-15)


def test_two_single_char_sources_posterior_ratio():
    lm = hand_bigram()
    m = SourceSepModel(lm, 2)
    x = ("a", "b")
    r = posterior_unnorm(m, x, (1, 2)) - posterior_unnorm(m, x, (2, 1))
    # both interleavings extract the same pair of one-character sources
    direct = (math.log(0.7 * 0.3) + math.log(0.3 * 0.2)) - (math.log(0.3 * 0.2) + math.log(0.7 * 0.3))
    assert r == pytest.approx(direct, abs=1e-14)


def test_swapping_equal_adjacent_tags_is_a_no_op():
    m = SourceSepModel(hand_bigram(), 2)
    x = ("a", "b", "b")
    assert posterior_unnorm(m, x, (1, 1, 2)) == posterior_unnorm(m, x, (1, 1, 2))


def test_relabeling_identical_sources_is_symmetric():
    m = SourceSepModel(hand_bigram(), 2)
    x = ("a", "a", "b", "b")
    a = m.score_indices(m.encode_x(x), m.encode_y((1, 2, 1, 2)))
    b = m.score_indices(m.encode_x(x), m.encode_y((2, 1, 2, 1)))
    assert a == pytest.approx(b, abs=1e-14)


def test_interleaving_posterior_normalizes_against_enumeration():
    lm = BigramLM.random(CHARS, np.random.default_rng(3))
    m = SourceSepModel(lm, 2)
    x = ("a", "b", "b", "a")
    scores = np.array([posterior_unnorm(m, x, y) for y in itertools.product((1, 2), repeat=4)])
    _, G = enumerate_scores(m, m.encode_x(x))
    G = G[np.isfinite(G)]
    finite = scores[np.isfinite(scores)]
    lse = lambda v: float(np.log(np.exp(v - v.max()).sum()) + v.max())
    assert lse(finite) == pytest.approx(lse(G), abs=1e-12)
    p = np.exp(finite - lse(finite))
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_sourcesep_input_must_end_with_eos():
    m = SourceSepModel(hand_bigram(), 2)
    with pytest.raises(ValueError):
        m.check_input(np.array([0, 1]))


def test_posterior_unnorm_rejects_length_mismatch():
    m = SourceSepModel(hand_bigram(), 2)
    with pytest.raises(ValueError):
        posterior_unnorm(m, ("a", "b"), (1,))


def test_sourcesep_checkpoint_round_trip(tmp_path):
    lm = CharLM(CHARS, d=4, emb=3, seed=1)
    m = SourceSepModel(lm, 2)
    m.save(tmp_path / "ss")
    back = load_model(tmp_path / "ss.json")
    xi, yi = m.encode_x(("a", "b")), m.encode_y((2, 1))
    assert back.score_indices(xi, yi) == m.score_indices(xi, yi)


def test_enumerated_interleavings_count():
    assert len(enumerate_interleavings((2, 1))) == 3
