import math
from types import SimpleNamespace

import numpy as np
import pytest

from particle_smoothing.evaluation import (
    DEFAULT_M_GRID,
    LN2,
    RESULT_COLUMNS,
    ParticlePool,
    PoolCoverageError,
    evaluate_sampler,
    extra_seed,
    input_key,
    mean_offset_kl,
    offset_kl,
    pool_update,
    run_experiment,
)
from particle_smoothing.oohmm import OohmmModel, OohmmParams
from particle_smoothing.proposal import ExactCompatibility, NeuralProposal
from particle_smoothing.scoring import enumerate_scores
from particle_smoothing.smc import run_filter


def phat(seqs, weights, G):
    return SimpleNamespace(sequences=[tuple(s) for s in seqs], weights=np.asarray(weights, float),
                           G=np.asarray(G, float))


def exact_phat(model, x):
    paths, G = enumerate_scores(model, x)
    keep = np.isfinite(G)
    paths, G = paths[keep], G[keep]
    p = np.exp(G - np.logaddexp.reduce(G))
    return phat(paths, p, G)


@pytest.fixture
def model(tiny_params):
    return OohmmModel(tiny_params)


# ---------------------------------------------------------------- offset KL


def test_exact_posterior_with_full_pool_scores_zero(model):
    x = np.array([0, 1, 1])
    p = exact_phat(model, x)
    pool = ParticlePool().add("k", p.sequences, p.G)
    assert offset_kl(p, pool, "k") == pytest.approx(0.0, abs=1e-12)


def test_offset_kl_of_point_mass():
    G = np.array([-1.0, -2.0, -3.0])
    pool = ParticlePool().add("k", [(0,), (1,), (2,)], G)
    z = np.logaddexp.reduce(G)
    assert offset_kl(phat([(1,)], [1.0], [-2.0]), pool, "k") == pytest.approx(2.0 + z, abs=1e-12)


def test_offset_kl_bounds_true_kl(model):
    # a partial pool gives z <= log Z, so the offset never exceeds the true KL
    x = np.array([1, 0, 1, 1])
    full = exact_phat(model, x)
    logZ = np.logaddexp.reduce(full.G)
    s = run_filter(model, x, 6, "never", seed=3)
    pool = ParticlePool().add("k", s.sequences, s.G)
    true_kl = sum(w * (math.log(w) - g) for w, g in zip(s.weights, s.G) if w > 0) + logZ
    assert offset_kl(s, pool, "k") <= true_kl + 1e-12


def test_pool_shift_moves_all_samplers_equally(model):
    x = np.array([0, 0, 1])
    a = run_filter(model, x, 5, "never", seed=1)
    b = run_filter(model, x, 9, "never", seed=2)
    pool = ParticlePool().add("k", a.sequences, a.G).add("k", b.sequences, b.G)
    before = offset_kl(a, pool, "k") - offset_kl(b, pool, "k")
    full = exact_phat(model, x)
    pool.add("k", full.sequences, full.G)
    after = offset_kl(a, pool, "k") - offset_kl(b, pool, "k")
    assert after == pytest.approx(before, abs=1e-12)


def test_pool_coverage_error():
    pool = ParticlePool().add("k", [(0,)], [0.0])
    with pytest.raises(PoolCoverageError):
        offset_kl(phat([(1,)], [1.0], [0.0]), pool, "k")


def test_pool_ignores_duplicates_and_dead_paths():
    pool = ParticlePool().add("k", [(0, 1), (0, 1), (1, 1)], [-1.0, -5.0, -math.inf])
    assert pool.size("k") == 1
    assert pool.z("k") == -1.0
    assert ("k", (0, 1)) in pool and ("k", (1, 1)) not in pool
    assert pool.z("missing") == -math.inf


def test_pool_z_is_monotone(model):
    pool, zs = ParticlePool(), []
    x = np.array([1, 1, 0, 1])
    for seed in range(6):
        s = run_filter(model, x, 3, "never", seed=seed)
        pool.add("k", s.sequences, s.G)
        zs.append(pool.z("k"))
    assert all(b >= a for a, b in zip(zs, zs[1:]))


def test_pool_save_load(tmp_path):
    pool = ParticlePool().add("a", [(1, 0), (0, 0)], [-0.5, -1.5]).add("b", [(2,)], [-3.0])
    pool.save(tmp_path / "pool.jsonl")
    back = ParticlePool.load(tmp_path / "pool.jsonl")
    assert back.entries == pool.entries
    assert ParticlePool.load(tmp_path / "none.jsonl").entries == {}


def test_smoothing_run_adds_twice_M_filter_draws(model):
    x = np.array([0, 1, 0, 1, 1])
    pool = ParticlePool()
    pool_update(pool, "k", phat([], [], []), model, x, smoothing_M=8, seed=4)
    extra = run_filter(model, x, 16, "never", seed=extra_seed(4))
    assert pool.entries["k"] == ParticlePool().add("k", extra.sequences, extra.G).entries["k"]
    assert extra_seed(4) != 4
    with pytest.raises(ValueError):
        pool_update(pool, "k", phat([], [], []), smoothing_M=2)


def test_input_key_depends_on_task():
    assert input_key([1, 2]) == input_key(np.array([1, 2]))
    assert input_key([1, 2], "a") != input_key([1, 2], "b")


# ---------------------------------------------------------------- experiments


def inputs_for(n=4, seed=0, T_len=4):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 2, size=T_len) for _ in range(n)]


def test_default_grid():
    assert DEFAULT_M_GRID == (8, 16, 32, 64, 128)


def test_experiment_rows_and_columns(model, tiny_params):
    rep, pool = run_experiment(model, ExactCompatibility(tiny_params), inputs_for(), task="t",
                               M_grid=(2, 4), seeds=(0, 1))
    assert len(rep.rows) == 4 * 2 * 2 + 2
    beam = [r for r in rep.rows if r["sampler"] == "BEAM"]
    assert all(r["seed"] == "" for r in beam)
    text = rep.to_csv()
    assert text.splitlines()[0] == ",".join(RESULT_COLUMNS)
    assert all(line.endswith(",") for line in text.splitlines()[1:])
    assert "wall_ms" in rep.to_csv(timing=True)


def test_resampling_never_triggered_matches_plain(model):
    # with M = 1 the ESS is always M, so the ESS policy never resamples
    rep, _ = run_experiment(model, None, inputs_for(), samplers=("PF", "PF:R"), M_grid=(1,))
    a, b = rep.rows
    assert a["offset_kl_bits"] == b["offset_kl_bits"]


def test_dict_proposals_label_rows(model, tiny_params):
    props = {"exact": ExactCompatibility(tiny_params),
             "net": NeuralProposal(2, model.state_dim, d=3, emb=2, hidden=4)}
    rep, _ = run_experiment(model, props, inputs_for(2), samplers=("PS",), M_grid=(4,))
    assert [r["sampler"] for r in rep.rows] == ["PS[exact]", "PS[net]"]


def test_exact_proposal_beats_filter_with_enough_particles(model, tiny_params):
    rep, _ = run_experiment(model, ExactCompatibility(tiny_params), inputs_for(6, T_len=5),
                            samplers=("PF", "PS"), M_grid=(64,), seeds=(0, 1, 2))
    assert rep.mean_bits("PS", 64) <= rep.mean_bits("PF", 64) + 1e-9
    assert math.isnan(rep.mean_bits("PS", 3))


def test_experiment_is_reproducible_and_thread_independent(model, tiny_params, tmp_path):
    args = (model, ExactCompatibility(tiny_params), inputs_for(5))
    kw = dict(M_grid=(3, 6), seeds=(0, 1))
    a = run_experiment(*args, **kw)[0].to_csv(tmp_path / "a.csv")
    b = run_experiment(*args, **kw)[0].to_csv()
    c = run_experiment(*args, threads=3, **kw)[0].to_csv()
    assert a == b == c
    assert (tmp_path / "a.csv").read_text() == a


def test_kl_bits_are_nats_over_ln2(model, tiny_params):
    inputs = inputs_for(3)
    rep, pool = run_experiment(model, None, inputs, task="t", samplers=("PF",), M_grid=(5,))
    samples, keys, _ = evaluate_sampler(model, None, inputs, 5, "filter", seed=0, pool=pool, task="t")
    assert rep.rows[0]["offset_kl_bits"] == pytest.approx(mean_offset_kl(samples, keys, pool) / LN2, abs=1e-12)


def test_exact_model_posterior_gets_zero_offset():
    # a single-state chain: every sampler sees the exact posterior once the pool is full
    params = OohmmParams(np.ones((1, 1)), np.full((1, 2, 2), 0.25), 0)
    m = OohmmModel(params)
    rep, _ = run_experiment(m, None, [np.array([0, 1])], samplers=("BEAM",), M_grid=(4,))
    assert rep.rows[0]["offset_kl_bits"] == pytest.approx(0.0, abs=1e-12)
