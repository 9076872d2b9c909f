import numpy as np
import pytest

from meshpool.mesh import gen_synthetic_mesh


@pytest.fixture(scope="session")
def blob200():
    return gen_synthetic_mesh("blob", 200, 3)


@pytest.fixture(scope="session")
def sphere162():
    return gen_synthetic_mesh("sphere", 162, 0)


def random_connected_graph(rng, n, extra=None):
    """Random spanning tree plus extra random edges, positive weights."""
    from meshpool.mesh import WeightedGraph

    edges = {(int(rng.integers(0, i)), i) for i in range(1, n)}
    extra = n if extra is None else extra
    extra = min(extra, n * (n - 1) // 2 - len(edges))
    while extra > 0:
        i, j = sorted(rng.choice(n, 2, replace=False).tolist())
        if (i, j) not in edges:
            edges.add((i, j))
            extra -= 1
    edges = np.array(sorted(edges))
    return WeightedGraph(n, edges, rng.uniform(0.1, 2.0, size=len(edges)))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
