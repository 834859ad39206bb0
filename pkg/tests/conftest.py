import numpy as np
import pytest

from stepgrain.env import WorldConfig, generate_world

from oracles import tiny_config


@pytest.fixture(scope="session")
def toy_world():
    return generate_world(WorldConfig(), 0)


@pytest.fixture(scope="session")
def tiny_world():
    return generate_world(tiny_config(), 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_acceptance(line):
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
