import itertools

import numpy as np
import pytest

from particle_smoothing.oohmm import OohmmParams


def joint_by_latent_paths(params, x, y):
    """p(x, y) by summing over every latent path explicitly (independent oracle)."""
    T = len(x)
    total = 0.0
    for us in itertools.product(range(params.k), repeat=T):
        p, prev = 1.0, params.bos_index
        for t in range(T):
            p *= params.trans[prev, us[t]] * params.emit[us[t], x[t], y[t]]
            prev = us[t]
        total += p
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_params():
    rng = np.random.default_rng(7)
    return OohmmParams.random(rng, k=3, n_x=2, n_y=2)


def random_tiny_models(n, seed=0, max_k=3, max_T=5):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(1, max_k + 1))
        params = OohmmParams.random(rng, k=k, n_x=2, n_y=2, concentration=0.7)
        T = int(rng.integers(1, max_T + 1))
        x = rng.integers(0, 2, size=T)
        out.append((params, x))
    return out


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """``acceptance(n, ok, detail)`` records one criterion line for the summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n, ok, detail=""):
        lines[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        print(lines[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
