import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])


@pytest.fixture(scope="session")
def desk_base():
    """One pretrained desk base per session: (params, seconds)."""
    from desk import pretrain_base

    return pretrain_base(0)


@pytest.fixture(scope="session")
def desk(desk_base):
    from desk import run_desk

    base, seconds = desk_base
    return run_desk(base, seconds)
