import numpy as np
import pytest

from msm_sharp import validate_dataset


def random_dataset(rng, n=200, d=3, propensity=False):
    X = rng.normal(size=(n, d))
    e = 1.0 / (1.0 + np.exp(-(0.4 * X[:, 0] - 0.3 * X[:, -1])))
    z = (rng.random(n) < e).astype(int)
    z[:2] = (0, 1)
    y = X @ rng.normal(size=d) + rng.normal(size=n)
    return validate_dataset(X, z, y, known_propensity=e if propensity else None)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_ds(rng):
    return random_dataset(rng, n=120, d=2)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
