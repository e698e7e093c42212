"""Primal road networks, their dual (roads-as-nodes) graph, and node splits.

A primal network has intersections as nodes and road segments as directed
edges. The dual graph turns every segment into a node and connects segment
``a`` to segment ``b`` whenever ``a`` ends where ``b`` starts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from roadgnn.errors import ParseError, ReferentialIntegrityError

DEFAULT_CLASSES = (
    "motorway",
    "trunk",
    "primary",
    "secondary",
    "tertiary",
    "unclassified",
    "residential",
    "living_street",
)

UNLABELED = -1
SPLIT_NONE, SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2, 3
SPLIT_NAMES = {SPLIT_NONE: None, SPLIT_TRAIN: "train", SPLIT_VAL: "val", SPLIT_TEST: "test"}
_SPLIT_CODES = {name: code for code, name in SPLIT_NAMES.items()}

_ENDPOINT_TOL = 1e-6
_BOOL_ATTRS = ("oneway", "bridge", "tunnel")


def node_hash(node_id: str) -> int:
    """64-bit stable hash of a dual node id, used as key in binary files."""
    digest = hashlib.blake2b(node_id.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class Segment:
    u: str
    v: str
    key: int
    attrs: dict = field(default_factory=dict)
    geometry: tuple | None = None

    @property
    def dual_id(self) -> str:
        return f"{self.u}-{self.v}-{self.key}"


@dataclass(frozen=True)
class PrimalGraph:
    intersections: dict  # id -> (lon, lat)
    segments: tuple

    def __post_init__(self):
        seen = set()
        for seg in self.segments:
            for end in (seg.u, seg.v):
                if end not in self.intersections:
                    raise ReferentialIntegrityError(
                        f"segment {seg.dual_id} references unknown intersection {end!r}"
                    )
            triple = (seg.u, seg.v, seg.key)
            if triple in seen:
                raise ParseError(f"duplicate segment (u, v, key) = {triple}")
            seen.add(triple)
            if seg.geometry is not None:
                _check_geometry(seg, self.intersections)

    def segment_points(self, seg: Segment) -> list:
        """Geometry of ``seg``, falling back to the straight tail-head line."""
        if seg.geometry is not None:
            return [tuple(p) for p in seg.geometry]
        return [self.intersections[seg.u], self.intersections[seg.v]]


def _check_geometry(seg: Segment, intersections: dict) -> None:
    if len(seg.geometry) < 2:
        raise ParseError(f"segment {seg.dual_id}: geometry needs at least 2 points")
    for point, end in ((seg.geometry[0], seg.u), (seg.geometry[-1], seg.v)):
        lon, lat = intersections[end]
        if abs(point[0] - lon) > _ENDPOINT_TOL or abs(point[1] - lat) > _ENDPOINT_TOL:
            raise ParseError(
                f"segment {seg.dual_id}: geometry endpoint {tuple(point)} does not match "
                f"intersection {end!r} at {(lon, lat)}"
            )


def _load_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ParseError(
            f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}\n    {context}"
        ) from exc
    if not isinstance(doc, dict) or "nodes" not in doc or "edges" not in doc:
        raise ParseError(f"{path}: expected an object with 'nodes' and 'edges'")
    return doc


def _segment_from_json(i: int, rec: dict) -> Segment:
    try:
        u, v = str(rec["u"]), str(rec["v"])
    except KeyError as exc:
        raise ParseError(f"edges[{i}]: missing field {exc.args[0]!r}") from None
    key = rec.get("key", 0)
    if not isinstance(key, int) or isinstance(key, bool):
        raise ParseError(f"edges[{i}]: key must be an integer")
    attrs = {}
    if rec.get("highway") is not None:
        attrs["highway"] = str(rec["highway"])
    if rec.get("length") is not None:
        attrs["length"] = float(rec["length"])
    for name in _BOOL_ATTRS:
        if rec.get(name) is not None:
            if not isinstance(rec[name], bool):
                raise ParseError(f"edges[{i}]: {name} must be a boolean")
            attrs[name] = rec[name]
    geometry = rec.get("geometry")
    if geometry is not None:
        try:
            geometry = tuple((float(p[0]), float(p[1])) for p in geometry)
        except (TypeError, IndexError, ValueError):
            raise ParseError(f"edges[{i}]: geometry must be a list of [lon, lat]") from None
    return Segment(u, v, key, attrs, geometry)


def _primal_from_doc(doc: dict) -> PrimalGraph:
    intersections = {}
    for i, rec in enumerate(doc["nodes"]):
        try:
            intersections[str(rec["id"])] = (float(rec["lon"]), float(rec["lat"]))
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"nodes[{i}]: needs 'id', numeric 'lon' and 'lat'") from None
    segments = tuple(_segment_from_json(i, rec) for i, rec in enumerate(doc["edges"]))
    return PrimalGraph(intersections, segments)


def parse_primal(path) -> PrimalGraph:
    """Read a primal network JSON export (OSM-style nodes and edges)."""
    return _primal_from_doc(_load_json(path))


@dataclass(frozen=True)
class SplitSpec:
    """Random split request.

    ``val`` and ``test`` are node counts (int) or fractions of the labeled
    nodes (float < 1). Labeled nodes not drawn for val/test go to train;
    ``train``, when given, must agree with that remainder.
    """

    seed: int
    val: int | float = 0
    test: int | float = 0
    train: int | float | None = None


@dataclass(frozen=True, eq=False)
class RoadGraph:
    """Dual road graph: one node per primal segment.

    ``labels`` holds class indices into ``classes`` or -1 when the segment
    carries no recognised highway tag; ``split`` holds one of the SPLIT_*
    codes per node.
    """

    primal: PrimalGraph
    src: np.ndarray
    dst: np.ndarray
    classes: tuple
    labels: np.ndarray
    split: np.ndarray
    uturn_policy: str = "include"

    def __post_init__(self):
        for arr in (self.src, self.dst, self.labels, self.split):
            arr.setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return len(self.primal.segments)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @cached_property
    def node_ids(self) -> tuple:
        return tuple(seg.dual_id for seg in self.primal.segments)

    @cached_property
    def node_hashes(self) -> np.ndarray:
        return np.array([node_hash(i) for i in self.node_ids], dtype=np.uint64)

    @cached_property
    def index_of(self) -> dict:
        return {nid: i for i, nid in enumerate(self.node_ids)}

    @property
    def segments(self) -> tuple:
        return self.primal.segments

    def mask(self, name: str) -> np.ndarray:
        return self.split == _SPLIT_CODES[name]

    def split_counts(self) -> dict:
        return {name: int(np.sum(self.mask(name))) for name in ("train", "val", "test")}

    def adjacency(self, direction: str = "both") -> sp.csr_matrix:
        """Binary CSR adjacency; row ``v`` lists N(v) for the given direction."""
        return self._adjacency[direction]

    @cached_property
    def _adjacency(self) -> dict:
        n = self.num_nodes
        ones = np.ones(len(self.src), dtype=np.int8)
        out = sp.csr_matrix((ones, (self.src, self.dst)), shape=(n, n))
        inn = out.T.tocsr()
        both = (out + inn).tocsr()
        both.data[:] = 1
        result = {}
        for name, mat in (("out", out), ("in", inn), ("both", both)):
            mat.sort_indices()
            mat.sum_duplicates()
            result[name] = mat
        return result

    def degrees(self, direction: str = "both") -> np.ndarray:
        return np.diff(self.adjacency(direction).indptr)


def _resolve_direction(direction: str) -> str:
    if direction not in ("in", "out", "both"):
        raise ValueError(f"direction must be 'in', 'out' or 'both', got {direction!r}")
    return direction


def neighbors(graph: RoadGraph, v, direction: str = "both") -> list:
    """Dual neighbours of ``v`` (index or node id string), sorted by index."""
    _resolve_direction(direction)
    if isinstance(v, str):
        if v not in graph.index_of:
            raise KeyError(f"unknown node {v!r}")
        v = graph.index_of[v]
    if not 0 <= int(v) < graph.num_nodes:
        raise KeyError(f"unknown node {v!r}")
    adj = graph.adjacency(direction)
    return adj.indices[adj.indptr[v] : adj.indptr[v + 1]].tolist()


def _label_array(segments: Sequence[Segment], classes: Sequence[str]) -> np.ndarray:
    lookup = {name: i for i, name in enumerate(classes)}
    return np.array(
        [lookup.get(seg.attrs.get("highway"), UNLABELED) for seg in segments], dtype=np.int64
    )


def to_dual(
    primal: PrimalGraph,
    uturn_policy: str = "include",
    classes: Sequence[str] = DEFAULT_CLASSES,
) -> RoadGraph:
    """Build the dual graph: edge a->b iff head(a) == tail(b), a != b.

    With ``uturn_policy="exclude"`` the transition from a segment onto its
    own reverse (b runs from head(a) back to tail(a)) is dropped as well.
    """
    if uturn_policy not in ("include", "exclude"):
        raise ValueError(f"uturn_policy must be 'include' or 'exclude', got {uturn_policy!r}")
    segs = primal.segments
    by_tail = defaultdict(list)
    for j, seg in enumerate(segs):
        by_tail[seg.u].append(j)
    src, dst = [], []
    for i, a in enumerate(segs):
        for j in by_tail.get(a.v, ()):
            if j == i:
                continue
            if uturn_policy == "exclude" and segs[j].v == a.u:
                continue
            src.append(i)
            dst.append(j)
    n = len(segs)
    return RoadGraph(
        primal=primal,
        src=np.asarray(src, dtype=np.int64),
        dst=np.asarray(dst, dtype=np.int64),
        classes=tuple(classes),
        labels=_label_array(segs, classes),
        split=np.zeros(n, dtype=np.int8),
        uturn_policy=uturn_policy,
    )


def _as_count(value, total: int) -> int:
    if isinstance(value, float) and value < 1.0:
        return int(round(value * total))
    return int(value)


def split_nodes(graph: RoadGraph, spec: SplitSpec) -> RoadGraph:
    """Randomly assign labeled nodes to train/val/test; unlabeled nodes get none."""
    labeled = np.flatnonzero(graph.labels != UNLABELED)
    total = len(labeled)
    n_val = _as_count(spec.val, total)
    n_test = _as_count(spec.test, total)
    if n_val < 0 or n_test < 0:
        raise ValueError("split counts must be non-negative")
    if n_val + n_test > total:
        raise ValueError(
            f"requested val={n_val} + test={n_test} exceeds {total} labeled nodes"
        )
    n_train = total - n_val - n_test
    if spec.train is not None and _as_count(spec.train, total) != n_train:
        raise ValueError(
            f"train={spec.train} disagrees with the {n_train} labeled nodes left after val/test"
        )
    order = np.random.default_rng(spec.seed).permutation(labeled)
    split = np.zeros(graph.num_nodes, dtype=np.int8)
    split[order] = SPLIT_TRAIN
    split[order[:n_val]] = SPLIT_VAL
    split[order[n_val : n_val + n_test]] = SPLIT_TEST
    return dataclasses.replace(graph, split=split)


def with_labels(graph: RoadGraph, labels: Iterable[int]) -> RoadGraph:
    """Copy of ``graph`` with replaced label indices (splits kept)."""
    labels = np.asarray(list(labels), dtype=np.int64)
    if labels.shape != (graph.num_nodes,):
        raise ValueError("one label per node required")
    return dataclasses.replace(graph, labels=labels)


def _segment_to_json(seg: Segment) -> dict:
    rec = {"u": seg.u, "v": seg.v, "key": seg.key}
    rec.update(seg.attrs)
    if seg.geometry is not None:
        rec["geometry"] = [list(p) for p in seg.geometry]
    return rec


def primal_to_doc(primal: PrimalGraph) -> dict:
    return {
        "nodes": [
            {"id": nid, "lon": lon, "lat": lat}
            for nid, (lon, lat) in primal.intersections.items()
        ],
        "edges": [_segment_to_json(seg) for seg in primal.segments],
    }


def save_primal(primal: PrimalGraph, path) -> None:
    Path(path).write_text(json.dumps(primal_to_doc(primal)), encoding="utf-8")


def save_road_graph(graph: RoadGraph, path) -> None:
    """Write the primal schema with ``"dual": true`` and a per-node split field."""
    doc = primal_to_doc(graph.primal)
    doc["dual"] = True
    doc["uturn_policy"] = graph.uturn_policy
    doc["classes"] = list(graph.classes)
    for rec, code in zip(doc["edges"], graph.split.tolist()):
        rec["split"] = SPLIT_NAMES[code]
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_road_graph(path) -> RoadGraph:
    doc = _load_json(path)
    if not doc.get("dual"):
        raise ParseError(f"{path}: not a dual road graph file (missing \"dual\": true)")
    primal = _primal_from_doc(doc)
    graph = to_dual(
        primal,
        uturn_policy=doc.get("uturn_policy", "include"),
        classes=doc.get("classes", DEFAULT_CLASSES),
    )
    split = np.zeros(graph.num_nodes, dtype=np.int8)
    for i, rec in enumerate(doc["edges"]):
        name = rec.get("split")
        if name not in _SPLIT_CODES:
            raise ParseError(f"edges[{i}]: unknown split {name!r}")
        split[i] = _SPLIT_CODES[name]
    if np.any((split != SPLIT_NONE) & (graph.labels == UNLABELED)):
        raise ParseError(f"{path}: unlabeled node assigned to a split")
    return dataclasses.replace(graph, split=split)


def grid_primal(rows: int, cols: int, spacing_deg: float = 1e-3, two_way: bool = True,
                origin=(104.0, 30.6)) -> PrimalGraph:
    """Regular grid of intersections joined by straight road segments."""
    lon0, lat0 = origin
    inter = {}
    for r in range(rows):
        for c in range(cols):
            inter[f"n{r}_{c}"] = (lon0 + c * spacing_deg, lat0 + r * spacing_deg)
    segs = []
    for r in range(rows):
        for c in range(cols):
            for dr, dc in ((0, 1), (1, 0)):
                rr, cc = r + dr, c + dc
                if rr >= rows or cc >= cols:
                    continue
                a, b = f"n{r}_{c}", f"n{rr}_{cc}"
                segs.append(Segment(a, b, 0, {"highway": "residential"}))
                if two_way:
                    segs.append(Segment(b, a, 0, {"highway": "residential"}))
    return PrimalGraph(inter, tuple(segs))

