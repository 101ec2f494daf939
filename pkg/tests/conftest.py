import numpy as np
import pytest

from drbsde.core import TimeGrid
from drbsde.forward_sde import brownian, simulate_paths

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def clamped_ensemble():
    """Brownian paths from 0 on [0, 1] with N = 50, shared by the slower tests."""
    return simulate_paths(brownian(), TimeGrid(1.0, 50), 20000, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
