import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_graph
from roadgnn.errors import StaleCacheError
from roadgnn.gnn import (
    GnnModel,
    LayerBlock,
    SampledBlock,
    dense_forward,
    full_block,
    gcn_layer_forward,
    load_model,
    mean_aggregate,
    model_backward,
    model_forward,
    sage_layer_forward,
    sample_neighborhood,
    save_model,
)
from roadgnn.graph import PrimalGraph, Segment, grid_primal, neighbors, to_dual
from roadgnn.nn import Linear, gradient_check, linear_forward, relu, softmax_cross_entropy


def brute_force(model, graph, X):
    """Per-node loop over the single-node layer functions."""
    h = X.astype(np.float64)
    step = gcn_layer_forward if model.variant == "gcn" else sage_layer_forward
    for layer in model.layers:
        h = np.stack([
            step(layer, h[v], [h[u] for u in neighbors(graph, v)])
            for v in range(graph.num_nodes)
        ])
    return h, linear_forward(model.classifier, h)


class TestAggregation:
    def test_mean(self):
        assert mean_aggregate([[1, 2], [3, 4]]).tolist() == [2.0, 3.0]

    def test_empty(self):
        assert mean_aggregate([], dim=3).tolist() == [0.0, 0.0, 0.0]
        with pytest.raises(ValueError):
            mean_aggregate([])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mean_aggregate([[1, 2], [1, 2, 3]])

    def test_gcn_example(self):
        layer = Linear(np.eye(2), np.zeros(2))
        out = gcn_layer_forward(layer, [1.0, 0.0], [[0.0, 1.0], [2.0, -4.0]])
        np.testing.assert_allclose(out, [1.0, 0.0])

    def test_gcn_isolated_is_self(self):
        layer = Linear(np.eye(2), np.zeros(2))
        assert gcn_layer_forward(layer, [3.0, -1.0], [], activation=None).tolist() == [3.0, -1.0]

    def test_sage_example(self):
        layer = Linear(np.hstack([np.eye(2), 2 * np.eye(2)]), np.array([0.5, 0.5]))
        out = sage_layer_forward(layer, [1.0, 1.0], [[1.0, 0.0], [3.0, 2.0]])
        np.testing.assert_allclose(out, [1 + 4 + 0.5, 1 + 2 + 0.5])

    def test_sage_isolated_uses_zero_vector(self):
        rng = np.random.default_rng(0)
        layer = Linear.init(6, 4, rng)
        layer.b[:] = rng.normal(size=4)
        h = rng.normal(size=3)
        expected = relu(layer.W[:, :3] @ h + layer.b)
        np.testing.assert_allclose(sage_layer_forward(layer, h, []), expected, atol=1e-15)

    def test_sage_dim_check(self):
        with pytest.raises(ValueError):
            sage_layer_forward(Linear(np.eye(3), np.zeros(3)), [1.0, 2.0, 3.0], [])


@pytest.fixture
def graph30():
    return random_graph(30, 0.7, seed=4)


def features(graph, dim=6, seed=0):
    return np.random.default_rng(seed).normal(size=(graph.num_nodes, dim))


class TestSampling:
    def test_exhaustive_when_degree_below_fanout(self, graph30):
        targets = np.arange(graph30.num_nodes)
        block = sample_neighborhood(graph30, targets, (100, 100), np.random.default_rng(0))
        hop = block.layers[-1]
        for v, nbrs in zip(hop.dst.tolist(), hop.neighbor_lists()):
            assert sorted(nbrs) == neighbors(graph30, v)

    def test_fanout_caps_and_no_repeats(self):
        g = to_dual(grid_primal(6, 6))
        block = sample_neighborhood(g, [0, 5, 9], (2, 1), np.random.default_rng(1))
        assert block.fanouts == (2, 1)
        for hop, cap in zip(reversed(block.layers), (2, 1)):
            for v, nbrs in zip(hop.dst.tolist(), hop.neighbor_lists()):
                full = neighbors(g, v)
                assert len(nbrs) == min(cap, len(full))
                assert len(set(nbrs)) == len(nbrs) and set(nbrs) <= set(full)

    def test_targets_outward_structure(self):
        g = to_dual(grid_primal(6, 6))
        block = sample_neighborhood(g, [3, 1], (3, 2), np.random.default_rng(2))
        assert block.targets.tolist() == [3, 1]
        outer, inner = block.layers
        assert np.array_equal(inner.src[: inner.num_dst], inner.dst)
        assert np.array_equal(outer.dst, inner.src)
        assert np.array_equal(outer.src[: outer.num_dst], outer.dst)

    def test_isolated_target(self, path_primal):
        lone = Segment("A", "C", 0, {"highway": "primary"})
        g = to_dual(PrimalGraph(path_primal.intersections, (lone,)))
        block = sample_neighborhood(g, [0], (25, 10), np.random.default_rng(0))
        assert all(layer.neighbor_lists() == [[]] for layer in block.layers)

    def test_padding_with_replacement(self):
        g = to_dual(grid_primal(3, 3))
        block = sample_neighborhood(g, [0], (10,), np.random.default_rng(0), pad_with_replacement=True)
        nbrs = block.layers[0].neighbor_lists()[0]
        assert len(nbrs) == 10 and set(nbrs) <= set(neighbors(g, 0))

    def test_deterministic(self, graph30):
        a = sample_neighborhood(graph30, [0, 7, 12], (3, 2), np.random.default_rng(9))
        b = sample_neighborhood(graph30, [0, 7, 12], (3, 2), np.random.default_rng(9))
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.src, lb.src) and np.array_equal(la.indices, lb.indices)

    def test_bad_targets(self, graph30):
        with pytest.raises(KeyError):
            sample_neighborhood(graph30, [999], (2,), np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_neighborhood(graph30, [1, 1], (2,), np.random.default_rng(0))


@pytest.mark.parametrize("variant", ["gcn", "sage"])
class TestForward:
    def test_dense_matches_brute_force(self, graph30, variant):
        X = features(graph30)
        model = GnnModel.init(variant, 6, hidden=16, rng=np.random.default_rng(1))
        for layer in model.layers:
            layer.b[:] = np.random.default_rng(2).normal(size=layer.b.shape)
        z_ref, logits_ref = brute_force(model, graph30, X)
        fwd = dense_forward(model, graph30, X)
        np.testing.assert_allclose(fwd.z, z_ref, atol=1e-12)
        np.testing.assert_allclose(fwd.logits, logits_ref, atol=1e-12)

    def test_sampled_with_large_fanout_equals_dense(self, graph30, variant):
        X = features(graph30)
        model = GnnModel.init(variant, 6, hidden=16, rng=np.random.default_rng(3))
        targets = np.array([4, 0, 17, 29])
        block = sample_neighborhood(graph30, targets, (1000, 1000), np.random.default_rng(0))
        sampled = model_forward(model, X, block).logits
        dense = dense_forward(model, graph30, X).logits[targets]
        np.testing.assert_allclose(sampled, dense, atol=1e-10)

    def test_eval_is_deterministic(self, graph30, variant):
        X = features(graph30)
        model = GnnModel.init(variant, 6, hidden=16, dropout=0.3, rng=np.random.default_rng(4))
        a = dense_forward(model, graph30, X).logits
        b = dense_forward(model, graph30, X).logits
        assert np.array_equal(a, b)

    def test_gradient_check(self, graph30, variant):
        X = features(graph30, dim=5)
        model = GnnModel.init(variant, 5, hidden=16, num_classes=8, rng=np.random.default_rng(5))
        for p in model.parameters():
            if p.ndim == 1:
                p[:] = np.random.default_rng(6).normal(scale=0.1, size=p.shape)
        labels = np.random.default_rng(7).integers(0, 8, graph30.num_nodes)
        block = full_block(graph30, 2)

        def loss():
            return softmax_cross_entropy(model_forward(model, X, block).logits, labels)[0]

        fwd = model_forward(model, X, block)
        _, g = softmax_cross_entropy(fwd.logits, labels)
        grads = model_backward(model, fwd.cache, g)
        assert gradient_check(loss, model.parameters(), grads, n_samples=300) < 1e-4

    def test_gradient_check_with_dropout_mask(self, graph30, variant):
        X = features(graph30, dim=4)
        model = GnnModel.init(variant, 4, hidden=8, dropout=0.3, rng=np.random.default_rng(8))
        labels = np.random.default_rng(9).integers(0, 8, 10)
        block = sample_neighborhood(graph30, np.arange(10), (3, 2), np.random.default_rng(1))

        def loss():
            # a fresh generator with the same seed replays the same masks
            out = model_forward(model, X, block, train=True, rng=np.random.default_rng(42))
            return softmax_cross_entropy(out.logits, labels)[0]

        fwd = model_forward(model, X, block, train=True, rng=np.random.default_rng(42))
        _, g = softmax_cross_entropy(fwd.logits, labels)
        grads = model_backward(model, fwd.cache, g)
        assert gradient_check(loss, model.parameters(), grads) < 1e-4

    def test_zero_upstream_gives_zero_grads(self, graph30, variant):
        X = features(graph30)
        model = GnnModel.init(variant, 6, hidden=8)
        fwd = dense_forward(model, graph30, X)
        grads = model_backward(model, fwd.cache, np.zeros_like(fwd.logits))
        assert len(grads) == len(model.parameters())
        assert all(not g.any() for g in grads)

    def test_stale_cache(self, graph30, variant):
        X = features(graph30)
        model = GnnModel.init(variant, 6, hidden=8)
        fwd = dense_forward(model, graph30, X)
        model.touch()
        with pytest.raises(StaleCacheError):
            model_backward(model, fwd.cache, np.zeros_like(fwd.logits))
        with pytest.raises(StaleCacheError):
            model_backward(model.copy(), fwd.cache, np.zeros_like(fwd.logits))

    def test_neighbor_order_invariance(self, graph30, variant):
        X = features(graph30)
        model = GnnModel.init(variant, 6, hidden=8, rng=np.random.default_rng(10))
        block = full_block(graph30, 2)
        layer = block.layers[0]
        rng = np.random.default_rng(11)
        shuffled = layer.indices.copy()
        for i in range(layer.num_dst):
            rng.shuffle(shuffled[layer.indptr[i] : layer.indptr[i + 1]])
        other = LayerBlock(layer.dst, layer.src, layer.indptr, shuffled)
        a = model_forward(model, X, block).logits
        b = model_forward(model, X, SampledBlock([other, other], block.fanouts)).logits
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_save_load(self, tmp_path, graph30, variant):
        X = features(graph30)
        model = GnnModel.init(variant, 6, hidden=8, dropout=0.15, rng=np.random.default_rng(12))
        save_model(model, tmp_path / "m.rgn1", {"blocks": ["geometric"]})
        back, header = load_model(tmp_path / "m.rgn1")
        assert header["blocks"] == ["geometric"] and back.dropout == 0.15
        assert np.array_equal(dense_forward(back, graph30, X).logits,
                              dense_forward(model, graph30, X).logits)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["gcn", "sage"]))
def test_permutation_equivariance(seed, variant):
    g = random_graph(20, 0.7, seed)
    perm = np.random.default_rng(seed).permutation(g.num_nodes)
    permuted = to_dual(PrimalGraph(g.primal.intersections, tuple(g.segments[i] for i in perm)))
    X = features(g, dim=4, seed=seed)
    model = GnnModel.init(variant, 4, hidden=8, rng=np.random.default_rng(seed))
    a = dense_forward(model, g, X).logits
    b = dense_forward(model, permuted, X[perm]).logits
    np.testing.assert_allclose(a[perm], b, atol=1e-12)


def test_model_rejects_wrong_feature_width(graph30):
    model = GnnModel.init("gcn", 6, hidden=8)
    with pytest.raises(ValueError):
        dense_forward(model, graph30, features(graph30, dim=5))


def test_sage_isolated_node_ignores_other_features(path_primal):
    g = to_dual(PrimalGraph({**path_primal.intersections, "D": (1.0, 1.0), "E": (1.0, 1.001)},
                            (*path_primal.segments, Segment("D", "E", 0, {"highway": "primary"}))))
    assert neighbors(g, 2) == []
    model = GnnModel.init("sage", 3, hidden=4, rng=np.random.default_rng(0))
    X = np.random.default_rng(1).normal(size=(3, 3))
    base = dense_forward(model, g, X).logits[2]
    X[:2] = np.random.default_rng(2).normal(size=(2, 3)) * 10
    assert np.array_equal(dense_forward(model, g, X).logits[2], base)

