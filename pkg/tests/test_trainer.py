import csv
import math

import numpy as np
import pytest

from particle_smoothing.autodiff import tensor as T
from particle_smoothing.oohmm import OohmmModel, OohmmParams, brute_force_posterior
from particle_smoothing.proposal import ExactCompatibility, NeuralProposal
from particle_smoothing.trainer import (
    BaselineState,
    TrainConfig,
    baseline_update,
    d_phi,
    exclusive_grad,
    exclusive_loss,
    inclusive_grad,
    logq_tape,
    train_proposal,
    trajectories,
)

from conftest import random_tiny_models
from oracles import (
    enum_logq,
    exact_exclusive_grad,
    exclusive_objective,
    finite_difference,
    flat,
    inclusive_objective,
    log_z,
    path_grads,
    tiny_setup,
)


class ShiftedModel:
    """Adds ``c / T`` to every local score: ``G_T`` moves by ``c``, ``q`` does not."""

    def __init__(self, inner, c, T_len):
        self.inner, self.c, self.T_len = inner, c, T_len
        self.y_alphabet = inner.y_alphabet

    def init_values(self):
        return self.inner.init_values()

    def expand(self, states, x_t):
        nxt, g = self.inner.expand(states, x_t)
        return nxt, g + self.c / self.T_len


# ---------------------------------------------------------------- d and baseline


def test_d_is_minus_log_z_under_exact_proposal():
    for params, x in random_tiny_models(6, seed=14):
        m = OohmmModel(params)
        post = brute_force_posterior(params, x)
        for y, p in post.table.items():
            if p > 0:
                assert d_phi(m, ExactCompatibility(params), x, y) == pytest.approx(-post.log_z, abs=1e-10)


def test_d_zero_on_single_sequence_support():
    emit = np.zeros((1, 1, 1))
    emit[0, 0, 0] = 1.0
    params = OohmmParams(np.ones((1, 1)), emit, 0)
    m = OohmmModel(params)
    prop = NeuralProposal(1, 1, d=3, emb=2, hidden=4)
    assert d_phi(m, prop, [0, 0, 0], [0, 0, 0]) == 0.0


def test_d_shifts_against_score_offset():
    params, model, prop, x = tiny_setup(3)
    y = [0, 1, 0]
    shifted = ShiftedModel(model, 2.5, len(x))
    assert d_phi(shifted, prop, x, y) == pytest.approx(d_phi(model, prop, x, y) - 2.5, abs=1e-12)


def test_baseline_update_hand_value():
    s = baseline_update(BaselineState(), 1.0)
    assert s.b == pytest.approx(0.9) and s.updates == 1


def test_baseline_converges_geometrically():
    s = BaselineState(b=10.0)
    for i in range(1, 6):
        s = baseline_update(s, 3.0)
        assert s.b - 3.0 == pytest.approx(7.0 * 0.1 ** i, rel=1e-9)


def test_baseline_default_coefficients():
    assert TrainConfig().baseline_decay == (0.1, 0.9)
    with pytest.raises(ValueError):
        baseline_update(BaselineState(), math.nan)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=1.5)
    with pytest.raises(ValueError):
        TrainConfig(M_train=0)


# ---------------------------------------------------------------- tape pass


def test_logq_tape_matches_sampling_pass():
    _, model, prop, x = tiny_setup(1, T_len=4)
    traj = trajectories(model, prop, x, 9, np.random.default_rng(0))
    with T.Tape():
        lq = logq_tape(prop, traj).value
    np.testing.assert_allclose(lq, traj.logq, atol=1e-12)


def test_exact_proposal_sequence_q_sums_to_one():
    _, model, prop, x = tiny_setup(2)
    _, lq, _ = enum_logq(model, prop, x)
    assert np.exp(lq).sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------- inclusive gradient


def test_inclusive_gradient_with_exact_p_matches_finite_differences():
    _, model, prop, x = tiny_setup(4)
    paths, _, G = enum_logq(model, prop, x)
    p = np.exp(G - log_z(G))
    params = prop.trainable()
    g = flat(inclusive_grad(model, prop, x, paths=paths, weights=p), params)
    idx, fd = finite_difference(lambda: inclusive_objective(model, prop, x), params, np.random.default_rng(0))
    np.testing.assert_allclose(g[idx], fd, rtol=1e-4, atol=1e-8)


def test_single_particle_inclusive_is_negative_score():
    _, model, prop, x = tiny_setup(5)
    params = prop.trainable()
    rng = np.random.default_rng(3)
    traj = trajectories(model, prop, x, 1, np.random.default_rng(3))
    g = flat(inclusive_grad(model, prop, x, M=1, rng=rng), params)
    expected = -path_grads(model, prop, x, traj.paths)[0]
    np.testing.assert_allclose(g, expected, atol=1e-12)


def test_inclusive_gradient_vanishes_at_the_optimum():
    # q = p means p-weighted scores sum to zero (score identity)
    _, model, prop, x = tiny_setup(6)
    paths, lq, _ = enum_logq(model, prop, x)
    gl = path_grads(model, prop, x, paths)
    np.testing.assert_allclose((np.exp(lq)[:, None] * gl).sum(axis=0), 0.0, atol=1e-12)


# ---------------------------------------------------------------- exclusive gradient


def test_exclusive_exact_gradient_matches_finite_differences():
    _, model, prop, x = tiny_setup(7)
    params = prop.trainable()
    g = exact_exclusive_grad(model, prop, x)
    idx, fd = finite_difference(lambda: exclusive_objective(model, prop, x), params, np.random.default_rng(1))
    np.testing.assert_allclose(g[idx], fd, rtol=1e-4, atol=1e-8)


def test_squared_form_has_same_gradient():
    _, model, prop, x = tiny_setup(8)
    params = prop.trainable()
    traj = trajectories(model, prop, x, 16, np.random.default_rng(2))
    out = []
    for form in ("score", "squared"):
        with T.Tape() as tape:
            loss = exclusive_loss(traj, 0.4, proposal=prop, form=form)
        out.append(flat(tape.backward(loss, params), params))
    np.testing.assert_allclose(out[0], out[1], atol=1e-12)
    with pytest.raises(ValueError):
        exclusive_loss(traj, 0.0, proposal=prop, form="cubic")


def test_squared_form_matches_finite_differences():
    _, model, prop, x = tiny_setup(9)
    params = prop.trainable()
    paths = enum_logq(model, prop, x)[0]

    def objective():
        traj = trajectories(model, prop, x, paths=paths)
        return float(0.5 * np.mean((traj.logq - traj.G - 0.3) ** 2))

    traj = trajectories(model, prop, x, paths=paths)
    with T.Tape() as tape:
        loss = exclusive_loss(traj, 0.3, proposal=prop, form="squared")
    g = flat(tape.backward(loss, params), params)
    idx, fd = finite_difference(objective, params, np.random.default_rng(4))
    np.testing.assert_allclose(g[idx], fd, rtol=1e-4, atol=1e-8)


def test_exclusive_estimator_is_unbiased():
    _, model, prop, x = tiny_setup(13)
    params = prop.trainable()
    n, b = 100_000, 0.5
    est = flat(exclusive_grad(model, prop, x, n, BaselineState(b), np.random.default_rng(6)), params)
    # same draws, regrouped by path, give per-draw terms for the standard error
    traj = trajectories(model, prop, x, n, np.random.default_rng(6))
    uniq, inv = np.unique(traj.paths, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    gl = path_grads(model, prop, x, uniq)
    d = (traj.logq - traj.G - b)[:, None]
    terms_mean = (d * gl[inv]).mean(axis=0)
    np.testing.assert_allclose(est, terms_mean, rtol=1e-8, atol=1e-10)
    exact = exact_exclusive_grad(model, prop, x)
    # random projections keep the number of 3-SE comparisons small
    for v in np.random.default_rng(7).normal(size=(4, est.size)):
        proj = (d * gl[inv]) @ v
        se = proj.std() / np.sqrt(n)
        assert abs(est @ v - exact @ v) < 3 * se


def test_exclusive_expectation_does_not_depend_on_baseline():
    _, model, prop, x = tiny_setup(10)
    a = exact_exclusive_grad(model, prop, x, b=0.0)
    b = exact_exclusive_grad(model, prop, x, b=7.0)
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_mean_baseline_does_not_raise_variance():
    _, model, prop, x = tiny_setup(11)
    traj = trajectories(model, prop, x, 400, np.random.default_rng(5))
    uniq, inv = np.unique(traj.paths, axis=0, return_inverse=True)
    gl = path_grads(model, prop, x, uniq)[inv.reshape(-1)]
    d = traj.logq - traj.G

    def total_var(b):
        est = (d - b)[:, None] * gl
        return est.var(axis=0).sum()

    assert total_var(d.mean()) <= total_var(0.0)


def test_exclusive_grad_uses_the_baseline():
    _, model, prop, x = tiny_setup(12)
    params = prop.trainable()
    a = flat(exclusive_grad(model, prop, x, 8, BaselineState(0.0), np.random.default_rng(1)), params)
    b = flat(exclusive_grad(model, prop, x, 8, BaselineState(2.0), np.random.default_rng(1)), params)
    assert not np.allclose(a, b)


# ---------------------------------------------------------------- training loop


def small_task(seed=0, n=24):
    params = OohmmParams.random(np.random.default_rng(seed), k=3, n_x=2, n_y=2, concentration=0.5)
    model = OohmmModel(params)
    rng = np.random.default_rng(seed + 1)
    corpus = [rng.integers(0, 2, size=int(rng.integers(2, 6))) for _ in range(n)]
    return model, corpus


def test_train_rejects_empty_corpus():
    model, _ = small_task()
    prop = NeuralProposal(2, model.state_dim, d=3, emb=2, hidden=4)
    with pytest.raises(ValueError):
        train_proposal(model, prop, [], TrainConfig(max_epochs=1))


def test_train_honors_epoch_cap_and_writes_outputs(tmp_path):
    model, corpus = small_task()
    prop = NeuralProposal(2, model.state_dim, d=3, emb=2, hidden=4)
    cfg = TrainConfig(max_epochs=2, patience=5, M_train=4, batch_size=4, eval_M=4, steps_per_epoch=2)
    res = train_proposal(model, prop, corpus, cfg, dev=corpus[:4], log_path=tmp_path / "log.csv",
                         checkpoint_path=tmp_path / "p")
    epochs = {h["epoch"] for h in res.history}
    assert epochs == {0, 1, 2}
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["epoch", "split", "offset_kl", "mean_d", "b", "wall_clock"]
    assert all(r[-1] == "" for r in rows[1:])
    assert (tmp_path / "p.json").exists() and (tmp_path / "p.bin").exists()
    assert res.baseline.updates == 4


def test_training_is_seed_reproducible(tmp_path):
    model, corpus = small_task(2)
    cfg = TrainConfig(max_epochs=1, M_train=4, batch_size=4, eval_M=4, steps_per_epoch=3, seed=5)
    outs = []
    for i in range(2):
        prop = NeuralProposal(2, model.state_dim, d=3, emb=2, hidden=4, seed=1)
        train_proposal(model, prop, corpus, cfg, dev=corpus[:3], log_path=tmp_path / f"{i}.csv")
        outs.append((tmp_path / f"{i}.csv").read_bytes())
    assert outs[0] == outs[1]


def sticky_task(n=64):
    # tags track a persistent hidden state that later inputs reveal
    trans = np.array([[0.9, 0.1], [0.1, 0.9]])
    py = np.array([[0.9, 0.1], [0.1, 0.9]])
    px = np.array([[0.7, 0.3], [0.3, 0.7]])
    model = OohmmModel(OohmmParams(trans, px[:, :, None] * py[:, None, :], 0))
    rng = np.random.default_rng(4)
    return model, [rng.integers(0, 2, size=int(rng.integers(4, 9))) for _ in range(n)]


@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_training_reduces_dev_offset_kl(lam):
    model, corpus = sticky_task()
    prop = NeuralProposal(2, model.state_dim, d=6, emb=3, hidden=8, seed=2)
    cfg = TrainConfig(lam=lam, max_epochs=3, patience=3, M_train=8, batch_size=8, eval_M=8, lr=0.02, seed=1)
    res = train_proposal(model, prop, corpus, cfg, dev=corpus[:16])
    assert res.best_epoch >= 1
    assert res.best_dev_kl < res.initial_dev_kl
