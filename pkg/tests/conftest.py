import numpy as np
import pytest

from fedtl import data

ACCEPTANCE_RESULTS = []


def random_spd(rng, n, cond=10.0):
    """Random SPD matrix with prescribed condition number."""
    q = data.random_rotation(n, rng)
    lam = np.logspace(0, np.log10(cond), n) * rng.uniform(0.5, 2.0)
    return q @ np.diag(lam) @ q.T


def random_sym(rng, n, scale=1.0):
    g = rng.standard_normal((n, n)) * scale
    return 0.5 * (g + g.T)


def separable_set(seed=1, trials_per_class=40, channels=8, samples=128, high=4.0, spread=0.1):
    """Two classes: identity vs. half the eigenvalues raised to ``high``, randomly rotated."""
    rng = np.random.default_rng(seed)
    R = data.random_rotation(channels, rng)
    half = channels // 2
    bases = [np.eye(channels), R @ np.diag([high] * half + [1.0] * (channels - half)) @ R.T]
    bases[0] = R @ bases[0] @ R.T
    return data.synth_generate(bases, trials_per_class, samples, spread=spread, seed=seed, subject="sep")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{status}] {name}: {detail}")
