import numpy as np
import pytest

from sncontrol import RunConfig, make_problem
from sncontrol.leader import leader_system

ACCEPTANCE = []


@pytest.fixture(scope="session")
def small_problem():
    """Default nonlinear configuration on a coarse 30 x 30 grid."""
    return make_problem(RunConfig(n=30, m=30))


@pytest.fixture(scope="session")
def linear_problem():
    return make_problem(RunConfig(n=30, m=30, nonlinearity="linear", M=0.5))


@pytest.fixture(scope="session")
def linear_system(linear_problem):
    return leader_system(linear_problem)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
