import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_graph, write_primal
from roadgnn.errors import ParseError, ReferentialIntegrityError
from roadgnn.graph import (
    UNLABELED,
    PrimalGraph,
    Segment,
    SplitSpec,
    grid_primal,
    load_road_graph,
    neighbors,
    parse_primal,
    primal_to_doc,
    save_primal,
    save_road_graph,
    split_nodes,
    to_dual,
)


def brute_force_dual(primal, exclude_uturns=False):
    segs = primal.segments
    edges = set()
    for i, j in itertools.product(range(len(segs)), repeat=2):
        if i == j or segs[i].v != segs[j].u:
            continue
        if exclude_uturns and segs[j].v == segs[i].u:
            continue
        edges.add((i, j))
    return edges


def dual_edges(graph):
    return set(zip(graph.src.tolist(), graph.dst.tolist()))


class TestParsePrimal:
    def test_minimal_path(self, tmp_path):
        path = write_primal(
            tmp_path / "p.json",
            {"A": (0, 0), "B": (0, 1e-3), "C": (0, 2e-3)},
            [{"u": "A", "v": "B", "key": 0}, {"u": "B", "v": "C", "key": 0}],
        )
        primal = parse_primal(path)
        assert len(primal.intersections) == 3
        assert len(primal.segments) == 2

    def test_dangling_endpoint(self, tmp_path):
        path = write_primal(tmp_path / "p.json", {"A": (0, 0)}, [{"u": "A", "v": "Z", "key": 0}])
        with pytest.raises(ReferentialIntegrityError, match="'Z'"):
            parse_primal(path)

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"nodes": [],\n "edges": [ {"u": "A",, } ]}')
        with pytest.raises(ParseError, match="line 2"):
            parse_primal(path)

    def test_missing_attributes_stay_absent(self, tmp_path):
        path = write_primal(
            tmp_path / "p.json",
            {"A": (0, 0), "B": (0, 1e-3)},
            [{"u": "A", "v": "B", "key": 0, "oneway": True}],
        )
        seg = parse_primal(path).segments[0]
        assert seg.attrs == {"oneway": True}
        assert seg.geometry is None

    def test_duplicate_triple_rejected(self):
        inter = {"A": (0, 0), "B": (1, 1)}
        with pytest.raises(ParseError):
            PrimalGraph(inter, (Segment("A", "B", 0), Segment("A", "B", 0)))

    def test_geometry_must_touch_endpoints(self):
        inter = {"A": (0.0, 0.0), "B": (1.0, 1.0)}
        PrimalGraph(inter, (Segment("A", "B", 0, {}, ((0.0, 0.0), (1.0 + 5e-7, 1.0))),))
        with pytest.raises(ParseError):
            PrimalGraph(inter, (Segment("A", "B", 0, {}, ((0.0, 0.0), (1.0 + 1e-5, 1.0))),))

    def test_city_scale_roundtrip(self, tmp_path):
        big = grid_primal(75, 75)
        segs = tuple(
            Segment(s.u, s.v, s.key, {"highway": "residential", "length": 100.0 + i % 7,
                                      "oneway": bool(i % 2)})
            for i, s in enumerate(big.segments[:22041])
        )
        primal = PrimalGraph(big.intersections, segs)
        save_primal(primal, tmp_path / "big.json")
        loaded = parse_primal(tmp_path / "big.json")
        assert len(loaded.segments) == 22041
        assert primal_to_doc(loaded) == primal_to_doc(primal)


class TestToDual:
    def test_path(self, path_primal):
        g = to_dual(path_primal)
        assert g.num_nodes == 2
        assert dual_edges(g) == {(0, 1)}

    def test_two_way_uturn_policy(self):
        inter = {"A": (0, 0), "B": (0, 1e-3)}
        primal = PrimalGraph(inter, (Segment("A", "B", 0), Segment("B", "A", 0)))
        assert dual_edges(to_dual(primal, "include")) == {(0, 1), (1, 0)}
        assert dual_edges(to_dual(primal, "exclude")) == set()

    @pytest.mark.parametrize("policy", ["include", "exclude"])
    def test_grid_matches_brute_force(self, grid4, policy):
        g = to_dual(grid4, policy)
        assert dual_edges(g) == brute_force_dual(grid4, policy == "exclude")

    def test_label_preserving(self, grid4):
        g = to_dual(grid4)
        assert g.num_nodes == len(grid4.segments)
        for seg, node_seg in zip(grid4.segments, g.segments):
            assert node_seg.attrs == seg.attrs
        assert np.all(g.labels == g.classes.index("residential"))

    def test_no_self_loops_and_uturn_counts(self, grid4):
        inc, exc = to_dual(grid4, "include"), to_dual(grid4, "exclude")
        assert not np.any(inc.src == inc.dst)
        assert inc.num_edges > exc.num_edges
        one_way = grid_primal(4, 4, two_way=False)
        assert to_dual(one_way, "include").num_edges == to_dual(one_way, "exclude").num_edges

    def test_unknown_highway_is_unlabeled(self, path_primal):
        seg = Segment("A", "B", 1, {"highway": "footway"})
        primal = PrimalGraph(path_primal.intersections, path_primal.segments + (seg,))
        assert to_dual(primal).labels[-1] == UNLABELED


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=3, max_value=40), st.integers(0, 10_000))
def test_dual_invariants_random(n, seed):
    g = random_graph(n, 0.7, seed)
    assert g.num_nodes == n
    assert not np.any(g.src == g.dst)
    assert dual_edges(g) == brute_force_dual(g.primal)
    exc = to_dual(g.primal, "exclude")
    assert exc.num_edges <= g.num_edges


class TestSplit:
    def test_city_scale_split_counts(self):
        big = grid_primal(75, 75)
        primal = PrimalGraph(big.intersections, big.segments[:22041])
        g = split_nodes(to_dual(primal), SplitSpec(seed=3, val=1842, test=1981))
        assert g.split_counts() == {"train": 18218, "val": 1842, "test": 1981}

    def test_deterministic(self, grid4):
        g = to_dual(grid4)
        a = split_nodes(g, SplitSpec(7, val=5, test=5))
        b = split_nodes(g, SplitSpec(7, val=5, test=5))
        assert np.array_equal(a.split, b.split)

    def test_all_train(self, grid4):
        g = split_nodes(to_dual(grid4), SplitSpec(0))
        assert g.split_counts()["train"] == g.num_nodes

    def test_partition(self, grid4):
        g = split_nodes(to_dual(grid4), SplitSpec(1, val=0.2, test=0.1))
        masks = [g.mask(n) for n in ("train", "val", "test")]
        assert np.all(sum(m.astype(int) for m in masks) == (g.labels >= 0))

    def test_too_many_requested(self, grid4):
        g = to_dual(grid4)
        with pytest.raises(ValueError):
            split_nodes(g, SplitSpec(0, val=g.num_nodes, test=1))

    def test_unlabeled_never_split(self, path_primal):
        seg = Segment("A", "B", 1, {})
        g = to_dual(PrimalGraph(path_primal.intersections, path_primal.segments + (seg,)))
        g = split_nodes(g, SplitSpec(0, val=1))
        assert g.split[-1] == 0
        assert g.split_counts() == {"train": 1, "val": 1, "test": 0}


class TestNeighbors:
    def test_path(self, path_primal):
        g = to_dual(path_primal)
        assert neighbors(g, 0, "out") == [1]
        assert neighbors(g, 0, "in") == []
        assert neighbors(g, "B-C-0", "in") == [0]

    def test_unknown(self, path_primal):
        with pytest.raises(KeyError):
            neighbors(to_dual(path_primal), 5)

    def test_random_graph_matches_edge_scan(self):
        g = random_graph(50, 0.8, seed=11)
        edges = list(zip(g.src.tolist(), g.dst.tolist()))
        for v in range(g.num_nodes):
            out = sorted({b for a, b in edges if a == v})
            inn = sorted({a for a, b in edges if b == v})
            assert neighbors(g, v, "out") == out
            assert neighbors(g, v, "in") == inn
            assert neighbors(g, v, "both") == sorted(set(out) | set(inn))


def test_road_graph_roundtrip_is_deterministic(tmp_path, grid4):
    g = split_nodes(to_dual(grid4, "exclude"), SplitSpec(5, val=4, test=4))
    save_road_graph(g, tmp_path / "a.json")
    loaded = load_road_graph(tmp_path / "a.json")
    save_road_graph(loaded, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert np.array_equal(loaded.split, g.split)
    assert loaded.uturn_policy == "exclude"
    doc = json.loads((tmp_path / "a.json").read_text())
    assert doc["dual"] is True
    assert {e["split"] for e in doc["edges"]} == {"train", "val", "test"}
