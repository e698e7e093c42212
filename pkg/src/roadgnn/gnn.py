"""Two-layer message-passing networks over the dual road graph.

Both layer variants mean-aggregate neighbour representations:

* ``gcn``  - ``h_v = relu(W . mean({h_v} + {h_n : n in N(v)}) + b)``
  (the node itself joins the aggregated multiset);
* ``sage`` - ``h_v = relu(W . [h_v, mean({h_n : n in N(v)})] + b)``
  (self representation concatenated after aggregation).

Mini-batches run on a :class:`SampledBlock`, a stack of bipartite layers
produced by GraphSAGE-style fan-out sampling. Full-graph evaluation uses the
same code path on a block that keeps every neighbour.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from roadgnn.errors import StaleCacheError
from roadgnn.graph import RoadGraph
from roadgnn.nn import (
    Linear,
    dropout,
    linear_backward,
    linear_forward,
    read_checkpoint,
    relu,
    relu_backward,
    write_checkpoint,
)

VARIANTS = ("gcn", "sage")
DEFAULT_FANOUTS = (25, 10)


def mean_aggregate(vectors, dim: int | None = None) -> np.ndarray:
    """Elementwise mean; an empty collection gives the zero vector of ``dim``."""
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vectors:
        if dim is None:
            raise ValueError("dim is required to aggregate an empty neighbour set")
        return np.zeros(dim)
    lengths = {v.shape for v in vectors}
    if len(lengths) != 1:
        raise ValueError(f"vectors differ in length: {sorted(lengths)}")
    return np.mean(vectors, axis=0)


def gcn_layer_forward(layer: Linear, h_self, h_neighbors, activation=relu) -> np.ndarray:
    """Single-node GCN update over the multiset {self} + neighbours."""
    h_self = np.asarray(h_self, dtype=np.float64)
    if h_self.shape != (layer.in_dim,):
        raise ValueError(f"h_self has shape {h_self.shape}, layer expects ({layer.in_dim},)")
    agg = mean_aggregate([h_self, *h_neighbors])
    out = layer.W @ agg + layer.b
    return out if activation is None else activation(out)


def sage_layer_forward(layer: Linear, h_self, h_neighbors, activation=relu) -> np.ndarray:
    """Single-node GraphSAGE update: ``W . (h_self ++ mean(neighbours))``."""
    h_self = np.asarray(h_self, dtype=np.float64)
    if 2 * h_self.shape[0] != layer.in_dim:
        raise ValueError(
            f"layer in-dim {layer.in_dim} must be twice the feature dim {h_self.shape[0]}"
        )
    agg = mean_aggregate(list(h_neighbors), dim=h_self.shape[0])
    out = layer.W @ np.concatenate([h_self, agg]) + layer.b
    return out if activation is None else activation(out)


@dataclass(eq=False)
class LayerBlock:
    """One bipartite hop: ``dst`` nodes aggregate from ``src`` nodes.

    ``src`` starts with ``dst`` (same order); ``indptr``/``indices`` give, for
    each dst row, the local src positions of its (sampled) neighbours,
    repeated when drawn more than once.
    """

    dst: np.ndarray
    src: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    _mean: dict = field(default_factory=dict, repr=False)

    @property
    def num_dst(self) -> int:
        return len(self.dst)

    def neighbor_lists(self) -> list:
        return [
            self.src[self.indices[self.indptr[i] : self.indptr[i + 1]]].tolist()
            for i in range(self.num_dst)
        ]

    def mean_matrix(self, variant: str) -> sp.csr_matrix:
        """Row-stochastic aggregation operator of shape (dst, src)."""
        if variant not in self._mean:
            counts = np.diff(self.indptr)
            n_dst, n_src = self.num_dst, len(self.src)
            if variant == "gcn":
                rows = np.concatenate([np.arange(n_dst), np.repeat(np.arange(n_dst), counts)])
                cols = np.concatenate([np.arange(n_dst), self.indices])
                weights = 1.0 / (counts + 1.0)
                data = weights[rows]
            else:
                rows = np.repeat(np.arange(n_dst), counts)
                cols = self.indices
                data = 1.0 / counts[rows] if len(rows) else np.zeros(0)
            mat = sp.csr_matrix((data, (rows, cols)), shape=(n_dst, n_src))
            mat.sum_duplicates()
            self._mean[variant] = mat
        return self._mean[variant]


@dataclass(eq=False)
class SampledBlock:
    """Per-depth sampled neighbourhoods; ``layers[0]`` feeds the first GNN layer."""

    layers: list
    fanouts: tuple

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def targets(self) -> np.ndarray:
        return self.layers[-1].dst

    @property
    def input_nodes(self) -> np.ndarray:
        return self.layers[0].src


def _expand(dst: np.ndarray, picked: list, num_nodes: int) -> LayerBlock:
    counts = np.array([len(p) for p in picked], dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    flat = np.concatenate(picked).astype(np.int64) if picked else np.zeros(0, np.int64)
    pos = np.full(num_nodes, -1, dtype=np.int64)
    pos[dst] = np.arange(len(dst))
    fresh = flat[pos[flat] < 0]
    uniq, first = np.unique(fresh, return_index=True)
    new = uniq[np.argsort(first, kind="stable")]
    pos[new] = len(dst) + np.arange(len(new))
    src = np.concatenate([dst, new])
    return LayerBlock(dst, src, indptr, pos[flat])


def sample_neighborhood(graph: RoadGraph, targets, fanouts: Sequence[int],
                        rng: np.random.Generator, direction: str = "both",
                        pad_with_replacement: bool = False) -> SampledBlock:
    """GraphSAGE fan-out sampling, from the targets outward.

    ``fanouts[0]`` caps the neighbours drawn for the targets, ``fanouts[1]``
    for their neighbours, and so on. A node with more neighbours than the
    fan-out gets a uniform draw without replacement; otherwise every
    neighbour is kept, or, with ``pad_with_replacement``, ``fanout``
    draws with replacement.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= graph.num_nodes):
        raise KeyError("target id outside the graph")
    if len(np.unique(targets)) != len(targets):
        raise ValueError("targets must be unique")
    adj = graph.adjacency(direction)
    indptr, indices = adj.indptr, adj.indices
    layers = []
    frontier = targets
    for fanout in fanouts:
        picked = []
        for v in frontier.tolist():
            nbrs = indices[indptr[v] : indptr[v + 1]]
            deg = len(nbrs)
            if deg > fanout:
                nbrs = nbrs[np.sort(rng.choice(deg, size=fanout, replace=False))]
            elif pad_with_replacement and 0 < deg < fanout:
                nbrs = nbrs[rng.integers(deg, size=fanout)]
            picked.append(nbrs)
        layer = _expand(frontier, picked, graph.num_nodes)
        layers.append(layer)
        frontier = layer.src
    layers.reverse()
    return SampledBlock(layers, tuple(fanouts))


def full_block(graph: RoadGraph, depth: int = 2, direction: str = "both") -> SampledBlock:
    """Every node at every depth with its complete neighbour list."""
    adj = graph.adjacency(direction)
    nodes = np.arange(graph.num_nodes, dtype=np.int64)
    layer = LayerBlock(nodes, nodes, adj.indptr.astype(np.int64), adj.indices.astype(np.int64))
    return SampledBlock([layer] * depth, (None,) * depth)


@dataclass(eq=False)
class GnnModel:
    variant: str
    layers: list
    classifier: Linear
    dropout: float = 0.0
    version: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        prev = None
        for k, layer in enumerate(self.layers):
            if prev is not None:
                expected = 2 * prev if self.variant == "sage" else prev
                if layer.in_dim != expected:
                    raise ValueError(f"layer {k} in-dim {layer.in_dim} != {expected}")
            prev = layer.out_dim
        if self.classifier.in_dim != prev:
            raise ValueError("classifier in-dim must equal the last GNN layer out-dim")

    @classmethod
    def init(cls, variant: str, in_dim: int, hidden: int = 128, num_classes: int = 8,
             dropout: float = 0.0, depth: int = 2, rng: np.random.Generator | None = None,
             dtype=np.float64) -> "GnnModel":
        rng = rng or np.random.default_rng(0)
        widen = 2 if variant == "sage" else 1
        layers, d = [], in_dim
        for _ in range(depth):
            layers.append(Linear.init(widen * d, hidden, rng, dtype))
            d = hidden
        return cls(variant, layers, Linear.init(hidden, num_classes, rng, dtype), dropout)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def num_classes(self) -> int:
        return self.classifier.out_dim

    @property
    def in_features(self) -> int:
        d = self.layers[0].in_dim
        return d // 2 if self.variant == "sage" else d

    def parameters(self) -> list:
        params = []
        for layer in [*self.layers, self.classifier]:
            params += [layer.W, layer.b]
        return params

    def decay_mask(self) -> list:
        """Weights take weight decay, biases do not."""
        return [p.ndim == 2 for p in self.parameters()]

    def touch(self) -> None:
        """Mark parameters as changed, invalidating outstanding forward caches."""
        self.version += 1

    def copy(self) -> "GnnModel":
        return GnnModel(
            self.variant,
            [Linear(l.W.copy(), l.b.copy()) for l in self.layers],
            Linear(self.classifier.W.copy(), self.classifier.b.copy()),
            self.dropout,
        )


class ForwardCache(NamedTuple):
    model_id: int
    version: int
    block: SampledBlock
    inputs: list  # aggregated layer inputs
    pre: list  # pre-activations
    masks: list  # dropout masks after each layer
    z_dropped: np.ndarray


class Forward(NamedTuple):
    z: np.ndarray
    logits: np.ndarray
    cache: ForwardCache


def _aggregate(variant: str, mat: sp.csr_matrix, h: np.ndarray, n_dst: int) -> np.ndarray:
    if variant == "gcn":
        return np.asarray(mat @ h)
    return np.concatenate([h[:n_dst], np.asarray(mat @ h)], axis=1)


def model_forward(model: GnnModel, features, block: SampledBlock, train: bool = False,
                  rng: np.random.Generator | None = None) -> Forward:
    """Latent rows ``z`` and class logits for ``block.targets``.

    ``features`` is the full node feature matrix (array or FeatureMatrix);
    dropout is applied after every GNN layer in train mode only.
    """
    X = getattr(features, "values", features)
    if block.depth != model.depth:
        raise ValueError(f"block depth {block.depth} != model depth {model.depth}")
    if X.shape[1] != model.in_features:
        raise ValueError(f"feature width {X.shape[1]} != model input width {model.in_features}")
    src = block.input_nodes
    if src.size and src.max() >= X.shape[0]:
        raise IndexError(f"no feature row for node {int(src.max())}")
    h = X[src]
    inputs, pres, masks = [], [], []
    for layer, lb in zip(model.layers, block.layers):
        a = _aggregate(model.variant, lb.mean_matrix(model.variant), h, lb.num_dst)
        pre = linear_forward(layer, a)
        h, mask = dropout(relu(pre), model.dropout, train, rng)
        inputs.append(a)
        pres.append(pre)
        masks.append(mask)
    z = relu(pres[-1])
    logits = linear_forward(model.classifier, h)
    cache = ForwardCache(id(model), model.version, block, inputs, pres, masks, h)
    return Forward(z, logits, cache)


def model_backward(model: GnnModel, cache: ForwardCache, grad_logits: np.ndarray) -> list:
    """Gradients for ``model.parameters()`` given dLoss/dlogits."""
    if cache.model_id != id(model) or cache.version != model.version:
        raise StaleCacheError("forward cache does not match the current model parameters")
    grads = []
    dh, dWc, dbc = linear_backward(model.classifier, cache.z_dropped, grad_logits)
    for k in reversed(range(model.depth)):
        layer, lb = model.layers[k], cache.block.layers[k]
        dpre = relu_backward(cache.pre[k], dh * cache.masks[k])
        da, dW, db = linear_backward(layer, cache.inputs[k], dpre)
        grads = [dW, db] + grads
        if k == 0:
            break
        mat = lb.mean_matrix(model.variant)
        if model.variant == "gcn":
            dh = np.asarray(mat.T @ da)
        else:
            d = da.shape[1] // 2
            dh = np.asarray(mat.T @ da[:, d:])
            dh[: lb.num_dst] += da[:, :d]
    return grads + [dWc, dbc]


def dense_forward(model: GnnModel, graph: RoadGraph, features,
                  direction: str = "both") -> Forward:
    """Eval-mode forward over the whole graph with complete neighbourhoods."""
    return model_forward(model, features, full_block(graph, model.depth, direction))


def save_model(model: GnnModel, path, extra: dict | None = None) -> None:
    header = {
        "variant": model.variant,
        "dims": [model.in_features] + [l.out_dim for l in model.layers],
        "dropout": model.dropout,
        "num_classes": model.num_classes,
        **(extra or {}),
    }
    write_checkpoint(path, header, model.parameters())


def load_model(path):
    """Returns ``(model, header)``."""
    header, arrays = read_checkpoint(path)
    pairs = [Linear(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
    model = GnnModel(header["variant"], pairs[:-1], pairs[-1], header["dropout"])
    return model, header
