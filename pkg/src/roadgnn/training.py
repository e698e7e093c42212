"""Transductive training, evaluation metrics and the hyperparameter grid."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from roadgnn.errors import NonFiniteError
from roadgnn.features import FeatureMatrix, standardize
from roadgnn.gnn import (
    DEFAULT_FANOUTS,
    VARIANTS,
    GnnModel,
    dense_forward,
    full_block,
    model_backward,
    model_forward,
    sample_neighborhood,
)
from roadgnn.graph import RoadGraph
from roadgnn.nn import OptimizerState, lr_schedule_step, sgd_step, softmax_cross_entropy

log = logging.getLogger(__name__)

# Hyperparameter grid searched for every model (36 points).
DEFAULT_SPACE = {
    "lr": [0.5, 0.05],
    "gamma": [0.2, 0.5, 0.8],
    "weight_decay": [0.0004, 0.0008],
    "dropout": [0.0, 0.15, 0.3],
}


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "sage"
    hidden: int = 128
    lr: float = 0.05
    gamma: float = 0.5
    weight_decay: float = 0.0004
    dropout: float = 0.15
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 64
    fanouts: tuple = DEFAULT_FANOUTS
    seed: int = 0
    blocks: tuple = ("geometric", "binary")
    direction: str = "both"
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "fanouts", tuple(int(f) for f in self.fanouts))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"variant: must be one of {VARIANTS}")
        if self.hidden < 1:
            problems.append("hidden: must be >= 1")
        if self.lr < 0:
            problems.append("lr: must be >= 0")
        if not 0 < self.gamma <= 1:
            problems.append("gamma: must be in (0, 1]")
        if self.weight_decay < 0:
            problems.append("weight_decay: must be >= 0")
        if not 0 <= self.dropout < 1:
            problems.append("dropout: must be in [0, 1)")
        if not 0 <= self.momentum < 1:
            problems.append("momentum: must be in [0, 1)")
        if not 1 <= self.epochs <= 100:
            problems.append("epochs: must be in [1, 100]")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if not self.fanouts or min(self.fanouts) < 1:
            problems.append("fanouts: need one positive fan-out per layer")
        if self.direction not in ("in", "out", "both"):
            problems.append("direction: must be in, out or both")
        if self.dtype not in ("float32", "float64"):
            problems.append("dtype: must be float32 or float64")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fanouts"] = list(self.fanouts)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- metrics


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    flat = np.bincount(y_true * num_classes + y_pred, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def micro_f1(confusion) -> float:
    """F1 from class-pooled TP, FP and FN."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(cm < 0):
        raise ValueError("confusion matrix must be non-negative")
    tp = int(np.trace(cm))
    fp = int(cm.sum(axis=0).sum()) - tp
    fn = int(cm.sum(axis=1).sum()) - tp
    if tp + fp + fn == 0:
        raise ValueError("micro-F1 of an all-zero confusion matrix is undefined")
    return 2 * tp / (2 * tp + fp + fn)


@dataclass
class Metrics:
    confusion: np.ndarray
    micro_f1: float
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @classmethod
    def from_confusion(cls, cm) -> "Metrics":
        cm = np.asarray(cm, dtype=np.int64)
        tp = np.diag(cm).astype(np.float64)
        pred = cm.sum(axis=0)
        true = cm.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            precision = np.where(pred > 0, tp / pred, 0.0)
            recall = np.where(true > 0, tp / true, 0.0)
            denom = precision + recall
            f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
        present = true > 0
        macro = float(f1[present].mean()) if present.any() else 0.0
        return cls(cm, micro_f1(cm), macro, precision, recall, f1)

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int) -> "Metrics":
        return cls.from_confusion(confusion_matrix(y_true, y_pred, num_classes))

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Metrics":
        return cls.from_confusion(np.array(d["confusion"], dtype=np.int64))


def _mask_indices(graph: RoadGraph, mask) -> np.ndarray:
    if isinstance(mask, str):
        mask = graph.mask(mask)
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if idx.size == 0:
        raise ValueError("evaluation mask is empty")
    if np.any(graph.labels[idx] < 0):
        raise ValueError("evaluation mask contains unlabeled nodes")
    return idx


def evaluate(model: GnnModel, graph: RoadGraph, features, mask, direction: str = "both",
             logits: np.ndarray | None = None) -> Metrics:
    """Metrics for the masked nodes from a full-neighbourhood eval-mode forward."""
    idx = _mask_indices(graph, mask)
    if logits is None:
        logits = dense_forward(model, graph, features, direction).logits
    pred = np.argmax(logits[idx], axis=1)
    return Metrics.from_predictions(graph.labels[idx], pred, graph.num_classes)


# --------------------------------------------------------------------------- training


@dataclass
class RunRecord:
    config: TrainConfig
    train_loss: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)
    best_epoch: int = -1
    val: Metrics | None = None
    test: Metrics | None = None
    final_test: Metrics | None = None
    status: str = "ok"
    error: str | None = None
    checkpoint: str | None = None
    model: GnnModel | None = field(default=None, repr=False, compare=False)

    @property
    def best_val_f1(self) -> float:
        return self.val.micro_f1 if self.val is not None else float("-inf")

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "status": self.status,
            "error": self.error,
            "train_loss": self.train_loss,
            "val_f1": self.val_f1,
            "best_epoch": self.best_epoch,
            "val": None if self.val is None else self.val.to_dict(),
            "test": None if self.test is None else self.test.to_dict(),
            "final_test": None if self.final_test is None else self.final_test.to_dict(),
            "checkpoint": self.checkpoint,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunRecord":
        def metrics(key):
            return None if d.get(key) is None else Metrics.from_dict(d[key])

        return cls(
            config=TrainConfig.from_dict(d["config"]),
            train_loss=list(d["train_loss"]),
            val_f1=list(d["val_f1"]),
            best_epoch=d["best_epoch"],
            val=metrics("val"),
            test=metrics("test"),
            final_test=metrics("final_test"),
            status=d["status"],
            error=d.get("error"),
            checkpoint=d.get("checkpoint"),
        )


def prepare_features(graph: RoadGraph, features: FeatureMatrix, blocks: Sequence[str]) -> FeatureMatrix:
    """Select blocks, align rows with ``graph`` and standardize on train nodes."""
    fm = features.rows_for(graph).select(blocks)
    return standardize(fm, graph.mask("train"))


def _rngs(seed: int):
    streams = np.random.SeedSequence(seed).spawn(4)
    return [np.random.default_rng(s) for s in streams]


def train(config: TrainConfig, graph: RoadGraph, features: FeatureMatrix) -> RunRecord:
    """Mini-batch training on the train split, model selection on val.

    Aggregation sees every node (val/test features included); only train
    labels enter the loss. Test metrics come from the best-validation epoch;
    ``final_test`` records the last epoch for comparison.
    """
    dtype = np.dtype(config.dtype)
    fm = prepare_features(graph, features, config.blocks)
    X = fm.values.astype(dtype)
    train_idx = np.flatnonzero(graph.mask("train"))
    if train_idx.size == 0:
        raise ValueError("graph has no training nodes; run split_nodes first")
    has_val = graph.mask("val").any()
    init_rng, order_rng, sample_rng, drop_rng = _rngs(config.seed)
    model = GnnModel.init(
        config.variant, X.shape[1], config.hidden, graph.num_classes,
        config.dropout, depth=len(config.fanouts), rng=init_rng, dtype=dtype,
    )
    state = OptimizerState(config.lr, config.momentum, config.weight_decay, config.gamma)
    params, decay = model.parameters(), model.decay_mask()
    labels = graph.labels
    eval_block = full_block(graph, model.depth, config.direction)
    record = RunRecord(config)
    best_model, best_score = model.copy(), -math.inf

    for epoch in range(config.epochs):
        lr_schedule_step(state, epoch)
        order = order_rng.permutation(train_idx)
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            block = sample_neighborhood(graph, batch, config.fanouts, sample_rng, config.direction)
            fwd = model_forward(model, X, block, train=True, rng=drop_rng)
            loss, grad = softmax_cross_entropy(fwd.logits, labels[block.targets])
            if not math.isfinite(loss):
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}, "
                    f"lr={state.lr}"
                )
            grads = model_backward(model, fwd.cache, grad)
            sgd_step(params, grads, state, decay)
            model.touch()
            losses.append(loss * len(batch))
        record.train_loss.append(float(np.sum(losses) / len(order)))
        if has_val:
            logits = model_forward(model, X, eval_block).logits
            score = evaluate(model, graph, X, "val", logits=logits).micro_f1
        else:
            score = -record.train_loss[-1]
        record.val_f1.append(float(score))
        if score > best_score:
            best_score, record.best_epoch = score, epoch
            best_model = model.copy()
        log.debug("epoch %d loss %.4f val %.4f", epoch, record.train_loss[-1], score)

    if has_val:
        record.val = evaluate(best_model, graph, X, "val", config.direction)
    if graph.mask("test").any():
        record.test = evaluate(best_model, graph, X, "test", config.direction)
        record.final_test = evaluate(model, graph, X, "test", config.direction)
    record.model = best_model
    return record


# --------------------------------------------------------------------------- grid search


def grid_points(space: Mapping[str, Sequence]) -> list:
    """Cartesian product of the search space as a list of override dicts."""
    if not space or any(len(v) == 0 for v in space.values()):
        raise ValueError("search space must have at least one value per dimension")
    names = list(space)
    return [dict(zip(names, combo)) for combo in itertools.product(*(space[n] for n in names))]


def _run_point(args):
    config, graph, features = args
    try:
        return train(config, graph, features)
    except Exception as exc:  # any aborted run is recorded, never fatal
        log.warning("run %s failed: %s", config, exc)
        return RunRecord(config, status="failed", error=f"{type(exc).__name__}: {exc}")


def rank_records(records: Sequence[RunRecord]) -> list:
    """Successful runs by descending validation micro-F1 (stable), failures last."""
    ok = [r for r in records if r.status == "ok"]
    failed = [r for r in records if r.status != "ok"]
    return sorted(ok, key=lambda r: -r.best_val_f1) + failed


def grid_search(space: Mapping[str, Sequence], base: TrainConfig, graph: RoadGraph,
                features: FeatureMatrix, jobs: int = 1) -> list:
    """Train every grid point; returns records ranked by validation micro-F1."""
    configs = [dataclasses.replace(base, **point) for point in grid_points(space)]
    tasks = [(c, graph, features) for c in configs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_point, tasks))
    else:
        records = [_run_point(t) for t in tasks]
    return rank_records(records)


def top_k_average(records: Sequence[RunRecord], k: int = 5, split: str = "test",
                  rank_by: str = "val") -> float:
    """Mean ``split`` micro-F1 over the ``k`` best runs ranked on ``rank_by``."""
    ok = [r for r in records if r.status == "ok"]
    if len(ok) < k:
        raise ValueError(f"need at least {k} successful records, got {len(ok)}")
    ranked = sorted(ok, key=lambda r: -getattr(r, rank_by).micro_f1)
    return float(np.mean([getattr(r, split).micro_f1 for r in ranked[:k]]))


def write_runs_jsonl(records: Sequence[RunRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_runs_jsonl(path) -> list:
    with open(path) as fh:
        return [RunRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


SUMMARY_COLUMNS = ("variant", "lr", "gamma", "weight_decay", "dropout", "momentum",
                   "hidden", "batch_size", "epochs", "seed")


def write_grid_summary(records: Sequence[RunRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*SUMMARY_COLUMNS, "blocks", "status", "best_epoch",
                         "val_micro_f1", "test_micro_f1"])
        for r in records:
            cfg = r.config
            writer.writerow([
                *(getattr(cfg, c) for c in SUMMARY_COLUMNS),
                "+".join(cfg.blocks),
                r.status,
                r.best_epoch,
                "" if r.val is None else f"{r.val.micro_f1:.6f}",
                "" if r.test is None else f"{r.test.micro_f1:.6f}",
            ])
