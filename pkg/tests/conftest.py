import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from reptransfer.network import NetworkConfig, init_checkpoint  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = NetworkConfig(n_classes=3, widths=(4, 4, 6, 6, 6))


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_net():
    return init_checkpoint(TINY, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_run():
    from desk import run_desk_experiment
    return run_desk_experiment()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """criterion(n, passed, detail) records one acceptance line and returns ``passed``."""
    def record(n, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
