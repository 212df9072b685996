import numpy as np
import pytest

from sgnep.games.quadratic import quadratic_nash_oracle, random_quadratic_game
from sgnep.graph import build_comm_graph
from sgnep.topology import circle_plus_chords


@pytest.fixture(scope="session")
def quad_game():
    return random_quadratic_game(seed=1)


@pytest.fixture(scope="session")
def quad_solution(quad_game):
    return quadratic_nash_oracle(quad_game)


@pytest.fixture(scope="session")
def ring4():
    return build_comm_graph(circle_plus_chords(4, 2, np.random.default_rng(0)), 4)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
