import os

# every corrector solved during the test session checks its own invariants;
# set before any worker process is forked
os.environ["STOCHLOD_CHECK_INVARIANTS"] = "1"

import numpy as np
import pytest
from hypothesis import settings

from oracles import unit_meshes as meshes
from stochlod import FieldSpec

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


@pytest.fixture
def tiny1d():
    """Coarse n=4, four refinements (h = 1/64), eps = 4h."""
    coarse, fine = meshes(1, 4, 4)
    return coarse, fine, FieldSpec(eps=4 * fine.h)


@pytest.fixture
def small2d():
    """Coarse n=4 in 2D, two refinements (h = 1/16), eps = 4h."""
    coarse, fine = meshes(2, 4, 2)
    return coarse, fine, FieldSpec(eps=4 * fine.h)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def report():
    """Record one pass/fail line per acceptance criterion; echoed in the terminal summary."""

    def record(label, passed, detail):
        line = f"criterion {label}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
