"""Road-type classification on dual road graphs with visual feature encodings."""

from roadgnn.errors import (
    NonFiniteError,
    ParseError,
    ReferentialIntegrityError,
    RoadGnnError,
    StaleCacheError,
)
from roadgnn.graph import (
    DEFAULT_CLASSES,
    PrimalGraph,
    RoadGraph,
    SplitSpec,
    load_road_graph,
    neighbors,
    parse_primal,
    save_road_graph,
    split_nodes,
    to_dual,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_CLASSES",
    "NonFiniteError",
    "ParseError",
    "PrimalGraph",
    "ReferentialIntegrityError",
    "RoadGnnError",
    "RoadGraph",
    "SplitSpec",
    "StaleCacheError",
    "load_road_graph",
    "neighbors",
    "parse_primal",
    "save_road_graph",
    "split_nodes",
    "to_dual",
]
