import sys

import numpy as np
import pytest

from coldgan.oracle import default_instance, likely_reward
from coldgan.verification import pretrained_policy


@pytest.fixture(scope="session")
def data():
    return default_instance(0)


@pytest.fixture(scope="session")
def reward(data):
    return likely_reward(data)


@pytest.fixture(scope="session")
def mle_policy(data):
    """Tabular MLE fit on the default instance, shared by the slower tests."""
    return pretrained_policy(data)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
