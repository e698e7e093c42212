"""Dense building blocks: linear maps, ReLU, dropout, softmax cross-entropy,
SGD with momentum and weight decay, the step learning-rate schedule, and a
finite-difference gradient checker.

Matrices are plain numpy arrays with rows as samples.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from roadgnn.errors import NonFiniteError, ParseError

LR_STEP_EPOCHS = 25


@dataclass(eq=False)
class Linear:
    """``y = x @ W.T + b`` with ``W`` of shape (out, in)."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent shapes W{self.W.shape}, b{self.b.shape}")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator,
             dtype=np.float64) -> "Linear":
        """Glorot-uniform weights in +-sqrt(6 / (in + out)), zero bias."""
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        W = rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)
        return cls(W, np.zeros(out_dim, dtype=dtype))

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


def linear_forward(layer: Linear, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ValueError(f"input shape {x.shape} does not match layer in-dim {layer.in_dim}")
    return x @ layer.W.T + layer.b


def linear_backward(layer: Linear, x: np.ndarray, grad_out: np.ndarray):
    """Gradients ``(dx, dW, db)`` for ``linear_forward(layer, x)``."""
    return grad_out @ layer.W, grad_out.T @ x, grad_out.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    if x.shape != upstream.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {upstream.shape}")
    return np.where(x > 0, upstream, 0.0)


def dropout(x: np.ndarray, p: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(output, mask)`` with ``output = x * mask``.

    The mask holds 0 for dropped entries and ``1 / (1 - p)`` for survivors.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Mean categorical cross-entropy and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


@dataclass(eq=False)
class OptimizerState:
    lr0: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    gamma: float = 1.0
    step_epochs: int = LR_STEP_EPOCHS
    lr: float = field(default=None)
    epoch: int = 0
    velocities: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr is None:
            self.lr = self.lr0


def lr_at(lr0: float, gamma: float, epoch: int, step_epochs: int = LR_STEP_EPOCHS) -> float:
    return lr0 * gamma ** (epoch // step_epochs)


def lr_schedule_step(state: OptimizerState, epoch: int) -> float:
    """Set ``state.lr`` to ``lr0 * gamma ** (epoch // 25)`` and return it."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    state.epoch = epoch
    state.lr = lr_at(state.lr0, state.gamma, epoch, state.step_epochs)
    return state.lr


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             state: OptimizerState, decay: Sequence[bool] | None = None) -> None:
    """In-place momentum SGD with L2 weight decay folded into the gradient.

    ``g' = g + wd * w``;  ``v = mu * v + g'``;  ``w = w - lr * v``.
    ``decay[i]`` false exempts parameter ``i`` (biases) from weight decay.
    """
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter required")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient; aborting update")
    if not state.velocities:
        state.velocities = [np.zeros_like(p) for p in params]
    if decay is None:
        decay = [True] * len(params)
    for w, g, v, d in zip(params, grads, state.velocities, decay):
        if w.shape != g.shape or v.shape != w.shape:
            raise ValueError(f"shape mismatch: param {w.shape}, grad {g.shape}")
        if d and state.weight_decay:
            g = g + state.weight_decay * w
        v *= state.momentum
        v += g
        w -= state.lr * v


def gradient_check(loss_fn: Callable[[], float], params: Sequence[np.ndarray],
                   analytic: Sequence[np.ndarray], n_samples: int = 200, h: float = 1e-5,
                   rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must read ``params`` by reference and be deterministic.
    Entries are drawn uniformly over all parameters (all of them when there
    are no more than ``n_samples``).
    """
    rng = rng or np.random.default_rng(0)
    sizes = [p.size for p in params]
    total = sum(sizes)
    if total <= n_samples:
        flat_idx = np.arange(total)
    else:
        flat_idx = np.sort(rng.choice(total, size=n_samples, replace=False))
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for k in flat_idx:
        which = int(np.searchsorted(offsets, k, side="right") - 1)
        p, g = params[which], analytic[which]
        idx = np.unravel_index(k - offsets[which], p.shape)
        orig = p[idx]
        p[idx] = orig + h
        plus = loss_fn()
        p[idx] = orig - h
        minus = loss_fn()
        p[idx] = orig
        numeric = (plus - minus) / (2.0 * h)
        a = float(g[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


CHECKPOINT_MAGIC = b"RGN1"


def write_checkpoint(path, header: dict, arrays: Sequence[np.ndarray]) -> None:
    """``RGN1`` + u32 header length + JSON header + little-endian f64 blocks."""
    header = dict(header, shapes=[list(a.shape) for a in arrays])
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not an RGN1 checkpoint")
    (n,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    pos = 8 + n
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape)
        arrays.append(arr.astype(np.float64))
        pos += 8 * count
    if pos != len(raw):
        raise ParseError(f"{path}: trailing or missing parameter bytes")
    return header, arrays
