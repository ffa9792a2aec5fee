import numpy as np
import pytest

from vkd.data import GenSpec, generate, split

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_splits():
    ds = generate(GenSpec(n_samples=600, seed=3))
    return split(ds, (0.6, 0.2, 0.2), 3)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
