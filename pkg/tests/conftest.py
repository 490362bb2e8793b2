import sys

import numpy as np
import pytest

from salp.mdp import MdpModel, random_mdp


def power_series(apply, x0, alpha, tol=1e-14):
    """sum_t alpha^t apply^t(x0), truncated once alpha^t drops below tol."""
    total = np.zeros_like(x0, dtype=float)
    term = np.asarray(x0, dtype=float)
    t = 0
    while alpha**t > tol:
        total += alpha**t * term
        term = apply(term)
        t += 1
    return total


def model_from_seed(seed, n=10, A=3, alpha=0.9):
    return random_mdp(n, A, alpha, np.random.default_rng(seed))


def deterministic_chain(alpha=0.5):
    """2 states, 2 actions: action 0 stays (cost 1 at x0, 2 at x1), action 1 swaps (cost 3, 0)."""
    P = np.zeros((2, 2, 2))
    P[0] = np.eye(2)
    P[1] = np.array([[0.0, 1.0], [1.0, 0.0]])
    g = np.array([[1.0, 3.0], [2.0, 0.0]])
    return MdpModel(P, g, alpha)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=[0, 1, 2])
def small_model(request):
    return model_from_seed(request.param)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n][1])
