"""Per-node feature vectors for dual road graphs.

A row is the concatenation of named blocks, in this order::

    geometric | binary | histogram | embedding

``geometric`` holds length, (sin, cos) of the bearing, the centroid
easting/northing and the centroid-relative resampled geometry; ``binary``
holds the one-way/bridge/tunnel flags; ``histogram`` the tile intensity
histograms; ``embedding`` the precomputed visual-encoder vectors.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from roadgnn.errors import ParseError
from roadgnn.graph import RoadGraph, node_hash
from roadgnn.raster import TILE_SIZE, ImageTile, Raster, extract_tile

log = logging.getLogger(__name__)

METERS_PER_DEGREE = 111320.0
HIST_BINS = 32
BLOCK_ORDER = ("geometric", "binary", "histogram", "embedding")
CONTINUOUS_BLOCKS = frozenset({"geometric", "embedding"})
BINARY_ATTRS = ("oneway", "bridge", "tunnel")

VFE_MAGIC = b"VFE1"
_VFE_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class LocalProjection:
    """Equirectangular projection about a reference point.

    Error relative to a conformal projection stays below ~0.1 % within
    roughly 20 km of the reference latitude.
    """

    ref_lon: float
    ref_lat: float

    @classmethod
    def for_points(cls, points) -> "LocalProjection":
        arr = np.asarray(points, dtype=np.float64)
        return cls(float(arr[:, 0].mean()), float(arr[:, 1].mean()))

    @property
    def meters_per_degree_lon(self) -> float:
        return METERS_PER_DEGREE * math.cos(math.radians(self.ref_lat))

    def forward(self, points) -> np.ndarray:
        arr = np.asarray(points, dtype=np.float64)
        x = (arr[..., 0] - self.ref_lon) * self.meters_per_degree_lon
        y = (arr[..., 1] - self.ref_lat) * METERS_PER_DEGREE
        return np.stack([x, y], axis=-1)

    def inverse(self, xy) -> np.ndarray:
        arr = np.asarray(xy, dtype=np.float64)
        lon = arr[..., 0] / self.meters_per_degree_lon + self.ref_lon
        lat = arr[..., 1] / METERS_PER_DEGREE + self.ref_lat
        return np.stack([lon, lat], axis=-1)


def _resample_planar(xy: np.ndarray, n: int) -> np.ndarray:
    seg = np.hypot(*np.diff(xy, axis=0).T)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    if total <= 0.0:
        raise ValueError("zero-length geometry cannot be resampled")
    targets = np.linspace(0.0, total, n)
    return np.stack([np.interp(targets, arc, xy[:, 0]), np.interp(targets, arc, xy[:, 1])], axis=1)


def resample_geometry(points, n: int = 10, projection: LocalProjection | None = None):
    """Resample a (lon, lat) polyline to ``n`` points equally spaced by arc length.

    Returns ``(n, 2)`` easting/northing offsets in meters from the centroid of
    the resampled points.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2 or n < 2:
        raise ValueError("need at least 2 input points and n >= 2")
    if projection is None:
        projection = LocalProjection(float(points[0, 0]), float(points[:, 1].mean()))
    sampled = _resample_planar(projection.forward(points), n)
    return sampled - sampled.mean(axis=0)


def polyline_length(points, projection: LocalProjection | None = None) -> float:
    points = np.asarray(points, dtype=np.float64)
    if projection is None:
        projection = LocalProjection(float(points[0, 0]), float(points[:, 1].mean()))
    xy = projection.forward(points)
    return float(np.hypot(*np.diff(xy, axis=0).T).sum())


def bearing(points) -> float:
    """Initial great-circle bearing from the first to the last point, in [0, 360)."""
    if len(points) < 2:
        raise ValueError("bearing needs at least 2 points")
    lon1, lat1 = map(math.radians, points[0])
    lon2, lat2 = map(math.radians, points[-1])
    if lon1 == lon2 and lat1 == lat2:
        raise ValueError("bearing undefined for identical endpoints")
    dlon = lon2 - lon1
    y = math.sin(dlon) * math.cos(lat2)
    x = math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(lat2) * math.cos(dlon)
    deg = math.degrees(math.atan2(y, x)) % 360.0
    return 0.0 if deg == 360.0 else deg


def channel_histogram(channel: np.ndarray, normalize: bool = True) -> np.ndarray:
    counts = np.bincount((channel.ravel() >> 3).astype(np.intp), minlength=HIST_BINS)
    if normalize:
        return counts / channel.size
    return counts.astype(np.float64)


def histogram_features(tile: ImageTile, dsm_tile: ImageTile | None = None,
                       normalize: bool = True) -> np.ndarray:
    """32 bins of width 8 per channel: R, G, B then the optional DSM channel."""
    px = tile.pixels
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"RGB tile must have 3 channels, got shape {px.shape}")
    channels = [px[:, :, k] for k in range(3)]
    if dsm_tile is not None:
        dpx = dsm_tile.pixels
        if dpx.shape[:2] != px.shape[:2] or dpx.shape[2] != 1:
            raise ValueError(
                f"DSM tile shape {dpx.shape} does not match RGB tile {px.shape[:2]} x 1"
            )
        channels.append(dpx[:, :, 0])
    return np.concatenate([channel_histogram(ch, normalize) for ch in channels])


# --------------------------------------------------------------------------- embeddings


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    ids: np.ndarray  # uint64 node hashes
    vectors: np.ndarray  # (count, dim) float32

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.ids) != len(self.vectors):
            raise ValueError("vectors must be (count, dim) with one id per row")
        if self.vectors.shape[1] < 1:
            raise ValueError("embedding dim must be >= 1")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate node id in embedding table")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    @cached_property
    def _index(self) -> dict:
        return {int(h): i for i, h in enumerate(self.ids.tolist())}

    def get(self, key):
        """Vector for a node id string or 64-bit hash, or None."""
        if isinstance(key, str):
            key = node_hash(key)
        i = self._index.get(int(key))
        return None if i is None else self.vectors[i]

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Sequence[float]]) -> "EmbeddingTable":
        ids = np.array([node_hash(k) for k in mapping], dtype=np.uint64)
        vecs = np.array([np.asarray(v, dtype=np.float32) for v in mapping.values()])
        return cls(ids, vecs.astype(np.float32))


def _read_vfe1(path):
    raw = Path(path).read_bytes()
    if len(raw) < _VFE_HEADER.size:
        raise ParseError(f"{path}: truncated VFE1 header")
    magic, dim, count = _VFE_HEADER.unpack_from(raw)
    if magic != VFE_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}, expected {VFE_MAGIC!r}")
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
    body = raw[_VFE_HEADER.size :]
    if len(body) != count * rec.itemsize:
        raise ParseError(f"{path}: expected {count} records of dim {dim}, size mismatch")
    data = np.frombuffer(body, dtype=rec, count=count)
    return data["id"].astype(np.uint64), data["vec"].astype(np.float32).reshape(count, dim)


def _write_vfe1(path, ids, vectors) -> None:
    vectors = np.asarray(vectors, dtype=np.float32)
    count, dim = vectors.shape
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
    data = np.empty(count, dtype=rec)
    data["id"] = ids
    data["vec"] = vectors
    with open(path, "wb") as fh:
        fh.write(_VFE_HEADER.pack(VFE_MAGIC, dim, count))
        fh.write(data.tobytes())


def _read_embedding_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) != 2 or header[0] != "node_id" or not header[1].startswith("dim="):
            raise ParseError(f"{path}: header must be 'node_id,dim=<d>'")
        dim = int(header[1][4:])
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ParseError(
                    f"{path}: line {lineno}: ragged row with {len(row) - 1} values, expected {dim}"
                )
            ids.append(node_hash(row[0]))
            rows.append([float(v) for v in row[1:]])
    vectors = np.array(rows, dtype=np.float32).reshape(len(rows), dim)
    return np.array(ids, dtype=np.uint64), vectors


def load_embeddings(path, expected_dim: int | None = None) -> EmbeddingTable:
    """Read encoder vectors from CSV (``node_id,dim=<d>``) or VFE1 binary."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    ids, vectors = _read_vfe1(path) if magic == VFE_MAGIC else _read_embedding_csv(path)
    if len(np.unique(ids)) != len(ids):
        raise ParseError(f"{path}: duplicate node id")
    table = EmbeddingTable(ids, vectors)
    if expected_dim is not None and table.dim != expected_dim:
        raise ValueError(f"{path}: embedding dim {table.dim} != expected {expected_dim}")
    return table


def save_embeddings(table: EmbeddingTable, path) -> None:
    _write_vfe1(path, table.ids, table.vectors)


def save_embeddings_csv(mapping: Mapping[str, Sequence[float]], path) -> None:
    dims = {len(v) for v in mapping.values()}
    if len(dims) != 1:
        raise ValueError("all vectors must share one dim")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", f"dim={dims.pop()}"])
        for key, vec in mapping.items():
            writer.writerow([key, *(repr(float(v)) for v in vec)])


# --------------------------------------------------------------------------- feature matrix


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray  # (nodes, width) float64
    node_hashes: np.ndarray
    blocks: tuple  # ((name, width), ...)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("feature values must be 2-d")
        if sum(w for _, w in self.blocks) != self.values.shape[1]:
            raise ValueError(
                f"block widths {self.blocks} do not sum to row width {self.values.shape[1]}"
            )
        if len(self.node_hashes) != len(self.values):
            raise ValueError("one node hash per row required")
        self.values.setflags(write=False)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def block_names(self) -> tuple:
        return tuple(name for name, _ in self.blocks)

    def block_slice(self, name: str) -> slice:
        start = 0
        for block, width in self.blocks:
            if block == name:
                return slice(start, start + width)
            start += width
        raise KeyError(f"no block {name!r} in {self.block_names}")

    def continuous_columns(self) -> np.ndarray:
        mask = np.zeros(self.width, dtype=bool)
        for name in self.block_names:
            if name in CONTINUOUS_BLOCKS:
                mask[self.block_slice(name)] = True
        return mask

    def select(self, names: Sequence[str]) -> "FeatureMatrix":
        """Sub-matrix with the named blocks, kept in schema order."""
        missing = set(names) - set(self.block_names)
        if missing:
            raise KeyError(f"blocks {sorted(missing)} not present in {self.block_names}")
        keep = [(n, w) for n, w in self.blocks if n in names]
        cols = np.concatenate(
            [np.arange(self.width)[self.block_slice(n)] for n, _ in keep]
        ) if keep else np.zeros(0, dtype=np.intp)
        return FeatureMatrix(
            np.ascontiguousarray(self.values[:, cols]),
            self.node_hashes,
            tuple(keep),
            None if self.mean is None else self.mean[cols],
            None if self.std is None else self.std[cols],
            dict(self.meta),
        )

    def append_block(self, name: str, block: np.ndarray) -> "FeatureMatrix":
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2 or len(block) != len(self.values):
            raise ValueError("block must have one row per node")
        blocks = list(self.blocks) + [(name, block.shape[1])]
        blocks.sort(key=lambda b: BLOCK_ORDER.index(b[0]) if b[0] in BLOCK_ORDER else len(BLOCK_ORDER))
        parts = {n: self.values[:, self.block_slice(n)] for n in self.block_names}
        parts[name] = block
        values = np.concatenate([parts[n] for n, _ in blocks], axis=1)
        return FeatureMatrix(values, self.node_hashes, tuple(blocks), meta=dict(self.meta))

    def rows_for(self, graph: RoadGraph) -> "FeatureMatrix":
        """Reorder rows to match ``graph`` node order (joined on node hash)."""
        if np.array_equal(self.node_hashes, graph.node_hashes):
            return self
        index = {int(h): i for i, h in enumerate(self.node_hashes.tolist())}
        try:
            order = np.array([index[int(h)] for h in graph.node_hashes.tolist()])
        except KeyError:
            raise ValueError("feature matrix lacks rows for some graph nodes") from None
        return dataclasses.replace(
            self, values=self.values[order], node_hashes=self.node_hashes[order]
        )


@dataclass(frozen=True)
class TileSource:
    """Rasters in the graph's local planar frame (see LocalProjection)."""

    raster: Raster
    dsm: Raster | None = None
    projection: LocalProjection | None = None
    size: int = TILE_SIZE


def graph_projection(graph: RoadGraph) -> LocalProjection:
    return LocalProjection.for_points(list(graph.primal.intersections.values()))


def node_geometry(graph: RoadGraph, projection: LocalProjection, n_points: int):
    """Length, bearing, centroid (meters) and centroid-relative resampled points."""
    out = []
    for seg in graph.segments:
        points = graph.primal.segment_points(seg)
        xy = projection.forward(points)
        sampled = _resample_planar(xy, n_points)
        centroid = sampled.mean(axis=0)
        length = seg.attrs.get("length")
        if length is None:
            length = float(np.hypot(*np.diff(xy, axis=0).T).sum())
        out.append((float(length), bearing(points), centroid, sampled - centroid))
    return out


def geometric_block(graph: RoadGraph, n_points: int = 10,
                    projection: LocalProjection | None = None) -> np.ndarray:
    projection = projection or graph_projection(graph)
    rows = []
    for length, heading, centroid, offsets in node_geometry(graph, projection, n_points):
        theta = math.radians(heading)
        rows.append(
            np.concatenate([[length, math.sin(theta), math.cos(theta)], centroid, offsets.ravel()])
        )
    return np.array(rows, dtype=np.float64).reshape(graph.num_nodes, 5 + 2 * n_points)


def binary_block(graph: RoadGraph) -> np.ndarray:
    return np.array(
        [[1.0 if seg.attrs.get(a) else 0.0 for a in BINARY_ATTRS] for seg in graph.segments],
        dtype=np.float64,
    ).reshape(graph.num_nodes, len(BINARY_ATTRS))


def node_tiles(graph: RoadGraph, source: TileSource):
    """Yield ``(rgb_tile, dsm_tile_or_None)`` per node, centred and road-aligned."""
    projection = source.projection or graph_projection(graph)
    for _, heading, centroid, _ in node_geometry(graph, projection, 2):
        tile = extract_tile(source.raster, centroid, heading, source.size)
        dsm = None
        if source.dsm is not None:
            dsm = extract_tile(source.dsm, centroid, heading, source.size)
        yield tile, dsm


def histogram_block(graph: RoadGraph, source: TileSource) -> np.ndarray:
    return np.array([histogram_features(t, d) for t, d in node_tiles(graph, source)])


def embedding_block(graph: RoadGraph, table: EmbeddingTable):
    """Rows of encoder vectors in node order; missing nodes get zero vectors."""
    block = np.zeros((graph.num_nodes, table.dim), dtype=np.float64)
    missing = 0
    for i, h in enumerate(graph.node_hashes.tolist()):
        vec = table.get(h)
        if vec is None:
            missing += 1
        else:
            block[i] = vec
    if missing:
        log.warning("%d of %d nodes have no embedding; using zero vectors", missing, graph.num_nodes)
    return block, missing


def attach_embeddings(graph: RoadGraph, features: FeatureMatrix,
                      table: EmbeddingTable) -> FeatureMatrix:
    """``features`` (aligned to ``graph``) with the embedding block appended."""
    block, missing = embedding_block(graph, table)
    fm = features.rows_for(graph).append_block("embedding", block)
    fm.meta["missing_embeddings"] = missing
    return fm

def assemble_features(
    graph: RoadGraph,
    blocks: Sequence[str] = ("geometric", "binary"),
    *,
    n_points: int = 10,
    embeddings: EmbeddingTable | None = None,
    embedding_dim: int | None = None,
    tiles: TileSource | None = None,
    histograms: np.ndarray | None = None,
    projection: LocalProjection | None = None,
) -> FeatureMatrix:
    """Concatenate the selected blocks into one row per node.

    The histogram block comes from ``tiles`` (extracted on the fly) or a
    precomputed ``histograms`` array; the embedding block from
    ``embeddings``.
    """
    unknown = set(blocks) - set(BLOCK_ORDER)
    if unknown:
        raise ValueError(f"unknown feature blocks {sorted(unknown)}")
    parts, schema, meta = [], [], {"n_points": n_points, "missing_embeddings": 0}
    for name in BLOCK_ORDER:
        if name not in blocks:
            continue
        if name == "geometric":
            part = geometric_block(graph, n_points, projection)
        elif name == "binary":
            part = binary_block(graph)
        elif name == "histogram":
            if histograms is not None:
                part = np.asarray(histograms, dtype=np.float64)
                if part.shape[0] != graph.num_nodes:
                    raise ValueError("precomputed histograms need one row per node")
            elif tiles is not None:
                part = histogram_block(graph, tiles)
            else:
                raise ValueError("histogram block requested without tiles or histograms")
        else:
            if embeddings is None:
                raise ValueError("embedding block requested without an embedding table")
            if embedding_dim is not None and embeddings.dim != embedding_dim:
                raise ValueError(
                    f"embedding dim mismatch: table has {embeddings.dim}, expected {embedding_dim}"
                )
            part, meta["missing_embeddings"] = embedding_block(graph, embeddings)
        parts.append(part)
        schema.append((name, part.shape[1]))
    values = np.concatenate(parts, axis=1) if parts else np.zeros((graph.num_nodes, 0))
    return FeatureMatrix(values, graph.node_hashes, tuple(schema), meta=meta)


def standardize(fm: FeatureMatrix, train_mask) -> FeatureMatrix:
    """Scale continuous blocks to zero mean, unit std over the training rows.

    Binary and histogram columns are left as they are; continuous columns
    whose training std is below 1e-12 become all zeros.
    """
    train_mask = np.asarray(train_mask, dtype=bool)
    n_train = int(train_mask.sum())
    if n_train == 0:
        raise ValueError("standardize needs a non-empty training mask")
    if n_train < 2:
        raise ValueError("standardize needs at least 2 training rows")
    cont = fm.continuous_columns()
    train = fm.values[train_mask]
    mean = np.zeros(fm.width)
    std = np.ones(fm.width)
    mean[cont] = train[:, cont].mean(axis=0)
    std[cont] = train[:, cont].std(axis=0)
    flat = cont & (std < 1e-12)
    values = (fm.values - mean) / np.where(flat, 1.0, std)
    values[:, flat] = 0.0
    return dataclasses.replace(fm, values=values, mean=mean, std=std)


def save_feature_matrix(fm: FeatureMatrix, path) -> None:
    """VFE1 binary of the rows plus ``<path>.schema.json`` naming block widths."""
    path = Path(path)
    _write_vfe1(path, fm.node_hashes, fm.values)
    schema = {
        "width": fm.width,
        "count": len(fm.values),
        "blocks": [
            {"name": n, "width": w, "continuous": n in CONTINUOUS_BLOCKS} for n, w in fm.blocks
        ],
        **fm.meta,
    }
    schema_path(path).write_text(json.dumps(schema, indent=2))


def schema_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".schema.json")


def load_feature_matrix(path) -> FeatureMatrix:
    ids, vectors = _read_vfe1(path)
    schema = json.loads(schema_path(path).read_text())
    blocks = tuple((b["name"], int(b["width"])) for b in schema["blocks"])
    meta = {k: v for k, v in schema.items() if k not in ("width", "count", "blocks")}
    return FeatureMatrix(vectors.astype(np.float64), ids, blocks, meta=meta)
