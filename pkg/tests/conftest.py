import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from tdq.numerics import RandomStream  # noqa: E402


@pytest.fixture
def rng():
    return RandomStream(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


def record_acceptance(line: str) -> None:
    """Queue a line for the acceptance summary printed after the run."""
    _ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
