import numpy as np
import pytest
from hypothesis import settings

from rankgame.envs import random_mdp

settings.register_profile("rankgame", deadline=None, max_examples=60)
settings.load_profile("rankgame")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_mdp():
    return random_mdp(5, 3, seed=7, gamma=0.9, horizon=15)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
