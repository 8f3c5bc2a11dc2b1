import sys
from pathlib import Path

import numpy as np
import pytest

from pkcal.domain import DomainSpec, build_quadrature
from pkcal.kernel import KernelSpec

TESTS = Path(__file__).parent
DOUBLES = TESTS / "doubles"
DATA = TESTS / "data"


def double_command(name):
    return f"{sys.executable} {DOUBLES / name}"


@pytest.fixture
def unit():
    return DomainSpec(((0.0, 1.0),))


@pytest.fixture
def unit_rule(unit):
    return build_quadrature(unit, level=64)


@pytest.fixture
def matern():
    return KernelSpec("matern-5/2", (0.25,))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
