import json

import numpy as np
import pytest

from roadgnn.graph import PrimalGraph, Segment, grid_primal, to_dual


def write_primal(path, nodes, edges):
    doc = {
        "nodes": [{"id": k, "lon": lon, "lat": lat} for k, (lon, lat) in nodes.items()],
        "edges": edges,
    }
    path.write_text(json.dumps(doc))
    return path


def random_graph(n, p, seed, highway="residential"):
    """Dual graph built from a random primal multigraph with ``n`` segments."""
    rng = np.random.default_rng(seed)
    k = max(3, int(np.sqrt(n)))
    inter = {f"i{j}": (104.0 + 1e-3 * j, 30.0 + 1e-3 * (j % 3)) for j in range(k)}
    segs, keys = [], {}
    while len(segs) < n:
        u, v = rng.integers(k, size=2)
        if u == v or rng.random() > p:
            continue
        key = keys.get((u, v), 0)
        keys[(u, v)] = key + 1
        segs.append(Segment(f"i{u}", f"i{v}", key, {"highway": highway}))
    return to_dual(PrimalGraph(inter, tuple(segs)))


@pytest.fixture
def path_primal():
    inter = {"A": (0.0, 0.0), "B": (0.0, 1e-3), "C": (0.0, 2e-3)}
    segs = (Segment("A", "B", 0, {"highway": "primary"}), Segment("B", "C", 0, {"highway": "primary"}))
    return PrimalGraph(inter, segs)


@pytest.fixture
def grid4():
    return grid_primal(4, 4)


ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)
