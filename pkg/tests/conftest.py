import numpy as np
import pytest

from graphctr.graph import BipartiteGraph


def planted_graph(draw: int = 0):
    """60+40 users, 50+50 URLs; link probability 0.9 inside matching groups, 0.1 across."""
    r = np.random.default_rng(draw)
    zu = np.r_[np.zeros(60, int), np.ones(40, int)]
    zv = np.r_[np.zeros(50, int), np.ones(50, int)]
    P = np.where(zu[:, None] == zv[None, :], 0.9, 0.1)
    rows, cols = np.nonzero(r.random(P.shape) < P)
    g = BipartiteGraph.from_edges(rows, cols, [f"u{i}" for i in range(100)], [f"v{j}" for j in range(100)])
    return g, zu, zv


def random_graph(m: int, n: int, density: float, seed: int) -> BipartiteGraph:
    r = np.random.default_rng(seed)
    A = r.random((m, n)) < density
    rows, cols = np.nonzero(A)
    return BipartiteGraph.from_edges(rows, cols, [f"u{i}" for i in range(m)], [f"v{j}" for j in range(n)])


@pytest.fixture(scope="session")
def planted():
    return planted_graph(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
