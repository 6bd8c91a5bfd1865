import numpy as np
import pytest

from trajnav.config import ModelConfig
from trajnav.env import default_vocab, generate_environment, sample_episode
from trajnav.planner import NavModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vocab():
    return default_vocab()


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(d=32, heads=4, text_layers=1, ope_layers=2, mam_layers=2, mlm_layers=1)


@pytest.fixture(scope="session")
def model():
    return NavModel(ModelConfig(), seed=3)


@pytest.fixture(scope="session")
def grid_env():
    return generate_environment(5)


@pytest.fixture(scope="session")
def episode(grid_env):
    return sample_episode(grid_env, 11, min_len=3, max_len=5)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
