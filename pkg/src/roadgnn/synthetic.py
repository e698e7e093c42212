"""Desk-scale synthetic road networks with planted road-type labels.

The generator lays out a two-way street grid, assigns road classes in
contiguous runs along each street, and plants three tiers of evidence:

* geometry and flags: weakly informative (class-dependent length scale and
  flag probabilities buried in noise);
* histogram-like block: moderately informative (class-dependent surface
  brightness and road width mixed with a random per-node background);
* embedding block: strongly informative (class-dependent Gaussian means).
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from roadgnn.features import HIST_BINS, EmbeddingTable, assemble_features
from roadgnn.graph import DEFAULT_CLASSES, PrimalGraph, Segment, SplitSpec, split_nodes, to_dual

# Share of each DEFAULT_CLASSES road type; motorway, trunk and living_street
# are deliberately rare.
DEFAULT_IMBALANCE = (0.03, 0.04, 0.13, 0.16, 0.16, 0.15, 0.30, 0.03)

# Validation/test shares of the labeled nodes (1842 and 1981 of 22041).
VAL_SHARE = 1842 / 22041
TEST_SHARE = 1981 / 22041

_SPACING_DEG = 1e-3
_ORIGIN = (104.06, 30.66)


def class_counts(n: int, profile) -> np.ndarray:
    """Largest-remainder rounding of ``n * profile`` to integers summing to ``n``."""
    p = np.asarray(profile, dtype=np.float64)
    if np.any(p < 0) or p.sum() <= 0:
        raise ValueError("imbalance profile must be non-negative and not all zero")
    exact = n * p / p.sum()
    counts = np.floor(exact).astype(np.int64)
    short = n - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _street_segments(n_nodes: int, rng: np.random.Generator):
    """Two-way grid segments listed street by street, truncated to ``n_nodes``."""
    m = 2
    while 4 * m * (m - 1) < n_nodes:
        m += 1
    lon0, lat0 = _ORIGIN
    inter = {}
    for r in range(m):
        for c in range(m):
            jitter = rng.normal(scale=0.05 * _SPACING_DEG, size=2)
            inter[f"n{r}_{c}"] = (lon0 + c * _SPACING_DEG + jitter[0],
                                  lat0 + r * _SPACING_DEG + jitter[1])
    streets = [[(f"n{r}_{c}", f"n{r}_{c + 1}") for c in range(m - 1)] for r in range(m)]
    streets += [[(f"n{r}_{c}", f"n{r + 1}_{c}") for r in range(m - 1)] for c in range(m)]
    pairs = []
    for street in streets:
        for a, b in street:
            pairs.append((a, b))
            pairs.append((b, a))
    return inter, pairs[:n_nodes]


def _label_runs(counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    runs = []
    for cls, count in enumerate(counts.tolist()):
        left = count
        while left > 0:
            length = min(left, 2 * int(rng.integers(1, 5)))
            runs.append((cls, length))
            left -= length
    order = rng.permutation(len(runs))
    return np.concatenate([np.full(runs[i][1], runs[i][0]) for i in order])


def _histogram_rows(labels: np.ndarray, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Per-channel mixture of a road-surface and a background intensity curve."""
    edges = np.arange(HIST_BINS + 1) * 8.0
    surface = rng.uniform(70, 190, size=(n_classes, 3))
    width = np.linspace(0.55, 0.25, n_classes)[rng.permutation(n_classes)]
    rows = []
    for y in labels.tolist():
        mu_road = surface[y] + rng.normal(scale=25.0, size=3)
        mu_bg = rng.uniform(40, 220, size=3)
        w = np.clip(width[y] + rng.normal(scale=0.08), 0.05, 0.95)
        per_channel = []
        for ch in range(3):
            road = np.diff(ndtr((edges - mu_road[ch]) / 12.0))
            bg = np.diff(ndtr((edges - mu_bg[ch]) / 30.0))
            h = w * road + (1 - w) * bg
            per_channel.append(h / h.sum())
        rows.append(np.concatenate(per_channel))
    return np.array(rows)


def generate_synthetic(
    n_nodes: int = 2000,
    n_classes: int = 8,
    embedding_dim: int = 64,
    imbalance=DEFAULT_IMBALANCE,
    seed: int = 0,
    n_points: int = 10,
    embedding_separation: float = 0.45,
):
    """Build ``(graph, features, embeddings)`` for a synthetic road network.

    The graph comes split into train/val/test with the same shares as the
    reference dataset. ``features`` holds the geometric, binary and
    histogram blocks; the encoder vectors are returned as a separate table.
    """
    if n_nodes < 10 * n_classes:
        raise ValueError(f"need at least {10 * n_classes} nodes for {n_classes} classes")
    if len(imbalance) != n_classes:
        raise ValueError(f"imbalance profile has {len(imbalance)} entries, expected {n_classes}")
    if embedding_dim < 1:
        raise ValueError("embedding_dim must be >= 1")
    classes = DEFAULT_CLASSES if n_classes == len(DEFAULT_CLASSES) else tuple(
        f"class_{i}" for i in range(n_classes)
    )
    rng = np.random.default_rng(seed)
    inter, pairs = _street_segments(n_nodes, rng)
    labels = _label_runs(class_counts(n_nodes, imbalance), rng)

    length_scale = np.exp(np.linspace(-0.25, 0.25, n_classes))[rng.permutation(n_classes)]
    flag_prob = rng.uniform(0.05, 0.5, size=(n_classes, 3))
    segments = []
    for (u, v), y in zip(pairs, labels.tolist()):
        (x0, y0), (x1, y1) = inter[u], inter[v]
        bend = rng.normal(scale=0.03 * _SPACING_DEG, size=2)
        mid = ((x0 + x1) / 2 + bend[0], (y0 + y1) / 2 + bend[1])
        base = float(np.hypot((x1 - x0) * 96_000, (y1 - y0) * 111_320))
        flags = rng.random(3) < flag_prob[y]
        attrs = {
            "highway": classes[y],
            "length": base * length_scale[y] * float(rng.lognormal(0.0, 0.3)),
            "oneway": bool(flags[0]),
            "bridge": bool(flags[1]),
            "tunnel": bool(flags[2]),
        }
        segments.append(Segment(u, v, 0, attrs, ((x0, y0), mid, (x1, y1))))
    graph = to_dual(PrimalGraph(inter, tuple(segments)), "include", classes)
    graph = split_nodes(graph, SplitSpec(seed, val=VAL_SHARE, test=TEST_SHARE))

    hist = _histogram_rows(labels, n_classes, rng)
    means = rng.normal(scale=embedding_separation, size=(n_classes, embedding_dim))
    vectors = means[labels] + rng.normal(size=(n_nodes, embedding_dim))
    table = EmbeddingTable(graph.node_hashes.copy(), vectors.astype(np.float32))
    features = assemble_features(
        graph, ("geometric", "binary", "histogram"), n_points=n_points, histograms=hist
    )
    return graph, features, table

