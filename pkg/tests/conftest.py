import numpy as np
import pytest

from consensus_lp.engine import SolverConfig
from consensus_lp.model import ProblemSpec

# Dual ascent for the whole run (see README, "Dual sign").
ASCENT = dict(ascent_phase_iters=10**9)


def make_spec(cost, lower, upper, A_G=None, b_G=None, A_H=None, b_H=None):
    n = len(cost)
    A_G = np.zeros((0, n)) if A_G is None else np.asarray(A_G, float)
    A_H = np.zeros((0, n)) if A_H is None else np.asarray(A_H, float)
    b_G = np.zeros(A_G.shape[0]) if b_G is None else b_G
    b_H = np.zeros(A_H.shape[0]) if b_H is None else b_H
    return ProblemSpec(n, cost, A_G, b_G, A_H, b_H, lower, upper)


@pytest.fixture
def ascent_cfg():
    return SolverConfig(**ASCENT)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
