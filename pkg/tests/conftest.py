import copy

import numpy as np
import pytest

from forge import io
from forge.problem import LtvSystem
from forge.sls import FeedbackGain


def random_ltv(rng, n, n_i, n_o, T, scale=0.6):
    """Random time-varying system with moderately sized blocks."""
    A = [np.eye(n) + scale * rng.standard_normal((n, n)) / np.sqrt(n) for _ in range(T)]
    B = [rng.standard_normal((n, n_i)) for _ in range(T)]
    C = [rng.standard_normal((n_o, n)) for _ in range(T + 1)]
    return LtvSystem(A, B, C, rng.standard_normal(n))


def random_gain(rng, T, n_i, n_o, scale=0.5):
    return FeedbackGain.causal_part(scale * rng.standard_normal((T * n_i, T * n_o)), n_i, n_o)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def course_cfg():
    """The small fixed-gain obstacle course shipped as a preset."""
    return io.load_config("fig3-fixed-gain")


@pytest.fixture
def small_cfg(course_cfg):
    """The course shrunk to T = 4 with a coarse grid and a tiny sweep."""
    cfg = copy.deepcopy(course_cfg)
    cfg["system"]["T"] = 4
    cfg["demos"]["count"] = 30
    cfg["classify"] = {"grid": [4, 4], "window": [0.1, 3.1, -1.9, 1.1]}
    cfg["sweep"] = {"epsilons": [1e-4, 1e-2], "trials": 2, "theta": False}
    return cfg


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
