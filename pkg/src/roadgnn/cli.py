"""Command-line pipeline: ingest, featurize, tile, train, grid, eval, synth.

Every command reads optional settings from ``--config`` (JSON with a
``"version"`` field, one object per command name or flat keys), lets
explicit flags override them, and writes the resolved settings to
``<out>/resolved_config.json`` next to its artifacts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from roadgnn.errors import RoadGnnError
from roadgnn.features import (
    BLOCK_ORDER,
    TileSource,
    assemble_features,
    histogram_features,
    load_embeddings,
    load_feature_matrix,
    node_tiles,
    save_embeddings,
    save_feature_matrix,
)
from roadgnn.gnn import load_model, save_model
from roadgnn.graph import (
    DEFAULT_CLASSES,
    SplitSpec,
    load_road_graph,
    parse_primal,
    save_road_graph,
    split_nodes,
    to_dual,
)
from roadgnn.raster import Raster, load_raster, save_raster
from roadgnn.training import (
    DEFAULT_SPACE,
    TrainConfig,
    evaluate,
    grid_search,
    prepare_features,
    top_k_average,
    train,
    write_grid_summary,
    write_runs_jsonl,
)

log = logging.getLogger("roadgnn")

CONFIG_VERSION = 1


class ConfigError(RoadGnnError, ValueError):
    pass


# --------------------------------------------------------------------------- config handling


def _load_config(path, command: str) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or "version" not in doc:
        raise ConfigError(f"{path}: config must be a JSON object with a 'version' field")
    if doc["version"] != CONFIG_VERSION:
        raise ConfigError(f"{path}: version: unsupported config version {doc['version']!r}")
    section = doc.get(command, {})
    flat = {k: v for k, v in doc.items() if k != "version" and not isinstance(v, dict)}
    flat.update(section)
    for key in ("train", "space"):
        if key in doc and key not in flat:
            flat[key] = doc[key]
    return flat


def _resolve(args, command: str, keys) -> dict:
    """Config-file values overlaid with the flags given on the command line."""
    cfg = _load_config(args.config, command)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _existing(cfg: dict, key: str, command: str, required: bool = True):
    value = cfg.get(key)
    if value is None:
        if required:
            raise ConfigError(f"{command}.{key}: required")
        return None
    path = Path(value)
    if not path.exists():
        raise FileNotFoundError(f"{command}.{key}: no such file: {path}")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, command: str, cfg: dict) -> None:
    doc = {"version": CONFIG_VERSION, "command": command, command: cfg}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _split_list(value):
    if value is None or isinstance(value, (list, tuple)):
        return value
    return [v for v in str(value).split(",") if v]


def _count(value):
    if value is None:
        return 0
    value = float(value)
    return int(value) if value >= 1 or value == 0 else value


_TRAIN_FLAGS = ("variant", "hidden", "lr", "gamma", "weight_decay", "dropout", "momentum",
                "epochs", "batch_size", "fanouts", "blocks", "direction", "dtype")


def _train_config(cfg: dict, command: str) -> TrainConfig:
    merged = dict(cfg.get("train", {}))
    for key in _TRAIN_FLAGS:
        if cfg.get(key) is not None:
            merged[key] = cfg[key]
    if cfg.get("seed") is not None:
        merged["seed"] = cfg["seed"]
    for key in ("fanouts", "blocks"):
        if key in merged:
            merged[key] = _split_list(merged[key])
    if "fanouts" in merged:
        merged["fanouts"] = [int(f) for f in merged["fanouts"]]
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{command}.train: {exc}") from None


# --------------------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    cfg = _resolve(args, "ingest", ("primal", "uturn", "val", "test", "classes"))
    primal_path = _existing(cfg, "primal", "ingest")
    classes = _split_list(cfg.get("classes")) or list(DEFAULT_CLASSES)
    cfg.setdefault("uturn", "include")
    cfg.setdefault("seed", 0)
    primal = parse_primal(primal_path)
    graph = to_dual(primal, cfg["uturn"], classes)
    graph = split_nodes(graph, SplitSpec(int(cfg["seed"]), _count(cfg.get("val")), _count(cfg.get("test"))))
    out = _out_dir(args)
    save_road_graph(graph, out / "graph.json")
    _echo_config(out, "ingest", {**cfg, "primal": str(primal_path), "classes": classes})
    counts = graph.split_counts()
    print(f"nodes={graph.num_nodes} edges={graph.num_edges} uturn={graph.uturn_policy}")
    print(f"train/val/test = {counts['train']}/{counts['val']}/{counts['test']}")
    return 0


def _tile_source(cfg: dict, command: str):
    raster_path = _existing(cfg, "raster", command, required=False)
    if raster_path is None:
        return None
    raster = load_raster(raster_path, _existing(cfg, "world", command))
    dsm = None
    dsm_path = _existing(cfg, "dsm", command, required=False)
    if dsm_path is not None:
        dsm = load_raster(dsm_path, _existing(cfg, "dsm_world", command))
    return TileSource(raster, dsm)


def cmd_featurize(args) -> int:
    cfg = _resolve(args, "featurize", ("graph", "blocks", "n_points", "raster", "world", "dsm",
                                       "dsm_world", "embeddings", "embedding_dim"))
    graph = load_road_graph(_existing(cfg, "graph", "featurize"))
    blocks = _split_list(cfg.get("blocks")) or ["geometric", "binary"]
    cfg["blocks"] = blocks
    tiles = _tile_source(cfg, "featurize") if "histogram" in blocks else None
    table = None
    if "embedding" in blocks:
        table = load_embeddings(_existing(cfg, "embeddings", "featurize"), cfg.get("embedding_dim"))
    fm = assemble_features(
        graph, blocks, n_points=int(cfg.get("n_points") or 10),
        embeddings=table, embedding_dim=cfg.get("embedding_dim"), tiles=tiles,
    )
    out = _out_dir(args)
    save_feature_matrix(fm, out / "features.vfe1")
    _echo_config(out, "featurize", cfg)
    widths = ", ".join(f"{n}={w}" for n, w in fm.blocks)
    print(f"width={fm.width} ({widths})")
    print(f"zero-fallback embeddings={fm.meta.get('missing_embeddings', 0)}")
    return 0


def cmd_tile(args) -> int:
    cfg = _resolve(args, "tile", ("graph", "raster", "world", "dsm", "dsm_world", "limit"))
    graph = load_road_graph(_existing(cfg, "graph", "tile"))
    _existing(cfg, "raster", "tile")
    source = _tile_source(cfg, "tile")
    out = _out_dir(args)
    tile_dir = out / "tiles"
    tile_dir.mkdir(exist_ok=True)
    limit = cfg.get("limit")
    with open(tile_dir / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "file", "heading", "out_of_bounds_fraction", "histogram"])
        for i, (tile, dsm) in enumerate(node_tiles(graph, source)):
            if limit is not None and i >= int(limit):
                break
            name = f"{i:06d}.ppm"
            save_raster(Raster(tile.pixels, (1.0, 0.0, 0.0, -1.0, 0.0, 0.0)), tile_dir / name)
            hist = histogram_features(tile, dsm)
            writer.writerow([graph.node_ids[i], name, f"{tile.heading:.6f}",
                             f"{tile.out_of_bounds_fraction:.6f}", " ".join(f"{h:.6g}" for h in hist)])
    _echo_config(out, "tile", cfg)
    print(f"tiles written to {tile_dir}")
    return 0


def _graph_and_features(cfg: dict, command: str):
    graph = load_road_graph(_existing(cfg, "graph", command))
    features = load_feature_matrix(_existing(cfg, "features", command))
    return graph, features


_TRAIN_KEYS = ("graph", "features", *_TRAIN_FLAGS)


def cmd_train(args) -> int:
    cfg = _resolve(args, "train", _TRAIN_KEYS)
    graph, features = _graph_and_features(cfg, "train")
    config = _train_config(cfg, "train")
    record = train(config, graph, features)
    out = _out_dir(args)
    save_model(record.model, out / "model.rgn1",
               {"blocks": list(config.blocks), "direction": config.direction})
    record.checkpoint = "model.rgn1"
    write_runs_jsonl([record], out / "run.jsonl")
    _echo_config(out, "train", {**cfg, "train": config.to_dict()})
    print(f"best epoch {record.best_epoch}: val micro-F1 {record.best_val_f1:.4f}"
          + ("" if record.test is None else f", test micro-F1 {record.test.micro_f1:.4f}"))
    return 0


def cmd_grid(args) -> int:
    cfg = _resolve(args, "grid", _TRAIN_KEYS)
    graph, features = _graph_and_features(cfg, "grid")
    base = _train_config(cfg, "grid")
    space = cfg.get("space") or DEFAULT_SPACE
    records = grid_search(space, base, graph, features, jobs=args.jobs)
    out = _out_dir(args)
    write_runs_jsonl(records, out / "grid.jsonl")
    write_grid_summary(records, out / "grid_summary.csv")
    _echo_config(out, "grid", {**cfg, "train": base.to_dict(), "space": space})
    ok = [r for r in records if r.status == "ok"]
    print(f"{len(records)} runs ({len(records) - len(ok)} failed)")
    k = min(5, len(ok))
    if k:
        print(f"top-{k} average test micro-F1: {top_k_average(ok, k):.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args, "eval", ("checkpoint", "graph", "features", "split"))
    model, header = load_model(_existing(cfg, "checkpoint", "eval"))
    graph, features = _graph_and_features(cfg, "eval")
    split = cfg.get("split") or "test"
    cfg["split"] = split
    fm = prepare_features(graph, features, header.get("blocks", features.block_names))
    metrics = evaluate(model, graph, fm, split, header.get("direction", "both"))
    out = _out_dir(args)
    doc = {"split": split, "count": metrics.total, **metrics.to_dict()}
    (out / "metrics.json").write_text(json.dumps(doc, indent=2))
    _echo_config(out, "eval", cfg)
    print(f"{split}: micro-F1 {metrics.micro_f1:.4f}, macro-F1 {metrics.macro_f1:.4f} "
          f"over {metrics.total} nodes")
    return 0


def cmd_synth(args) -> int:
    from roadgnn.synthetic import generate_synthetic

    cfg = _resolve(args, "synth", ("nodes", "embedding_dim"))
    cfg.setdefault("nodes", 2000)
    cfg.setdefault("embedding_dim", 64)
    cfg.setdefault("seed", 0)
    graph, features, table = generate_synthetic(
        int(cfg["nodes"]), embedding_dim=int(cfg["embedding_dim"]), seed=int(cfg["seed"])
    )
    out = _out_dir(args)
    save_road_graph(graph, out / "graph.json")
    save_feature_matrix(features, out / "features.vfe1")
    save_embeddings(table, out / "embeddings.vfe1")
    _echo_config(out, "synth", cfg)
    counts = graph.split_counts()
    print(f"nodes={graph.num_nodes} edges={graph.num_edges} "
          f"train/val/test = {counts['train']}/{counts['val']}/{counts['test']}")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with a 'version' field")
    common.add_argument("--seed", type=int, help="seed overriding the config file")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for grid")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="roadgnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="primal JSON -> split dual graph")
    p.add_argument("primal", nargs="?")
    p.add_argument("--uturn", choices=("include", "exclude"))
    p.add_argument("--val", help="validation count or fraction")
    p.add_argument("--test", help="test count or fraction")
    p.add_argument("--classes", help="comma-separated highway classes")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("featurize", parents=[common], help="assemble node feature matrix")
    p.add_argument("--graph")
    p.add_argument("--blocks", help=f"comma-separated subset of {','.join(BLOCK_ORDER)}")
    p.add_argument("--n-points", dest="n_points", type=int)
    p.add_argument("--raster")
    p.add_argument("--world")
    p.add_argument("--dsm")
    p.add_argument("--dsm-world", dest="dsm_world")
    p.add_argument("--embeddings")
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("tile", parents=[common], help="extract road-aligned tiles")
    p.add_argument("--graph")
    p.add_argument("--raster")
    p.add_argument("--world")
    p.add_argument("--dsm")
    p.add_argument("--dsm-world", dest="dsm_world")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_tile)

    for name, func, help_ in (("train", cmd_train, "train one configuration"),
                              ("grid", cmd_grid, "exhaustive hyperparameter grid")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--graph")
        p.add_argument("--features")
        p.add_argument("--variant", choices=("gcn", "sage"))
        p.add_argument("--hidden", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--dropout", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--fanouts", help="comma-separated fan-outs, targets outward")
        p.add_argument("--blocks")
        p.add_argument("--direction", choices=("in", "out", "both"))
        p.add_argument("--dtype", choices=("float32", "float64"))
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--graph")
    p.add_argument("--features")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--nodes", type=int)
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (RoadGnnError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
