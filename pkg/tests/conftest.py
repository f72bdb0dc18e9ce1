import time

import numpy as np
import pytest

from rtca.ctde import TrainConfig, td_train
from rtca.envs import CoopMatrixGame, GridCapture
from rtca.jointq import SarsaConfig, train_sarsa


def fd_rel_err(a, b) -> float:
    """Elementwise relative error with a small absolute floor in the denominator."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


def central_diff(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


@pytest.fixture(scope="session")
def grid_env():
    return GridCapture()


TIMINGS: dict[str, float] = {}


@pytest.fixture(scope="session")
def qmix_team(grid_env):
    start = time.perf_counter()
    team = td_train(grid_env, "qmix", TrainConfig(), seed=0)
    TIMINGS["train"] = time.perf_counter() - start
    return team


@pytest.fixture(scope="session")
def qmix_qnet(grid_env, qmix_team):
    start = time.perf_counter()
    net = train_sarsa(grid_env, qmix_team, SarsaConfig(), seed=0)
    TIMINGS["sarsa"] = time.perf_counter() - start
    return net


@pytest.fixture(scope="session")
def small_teams(grid_env):
    """Briefly trained teams: enough for plumbing tests, not for attack outcomes."""
    cfg = TrainConfig(episodes=30, hidden=(16,), log_every=10)
    return {algo: td_train(grid_env, algo, cfg, seed=1) for algo in ("vdn", "qmix")}


@pytest.fixture(scope="session")
def small_qnets(grid_env, small_teams):
    cfg = SarsaConfig(steps=300, hidden=(16,))
    return {algo: train_sarsa(grid_env, team, cfg, seed=1) for algo, team in small_teams.items()}


@pytest.fixture
def climb_game():
    return CoopMatrixGame([[11, -30, 0], [-30, 7, 6], [0, 0, 5]])


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
