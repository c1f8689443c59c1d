"""Mini-batch SGD training for layer graphs.

Plain SGD with optional momentum; deterministic under a fixed seed (weight
init, shuffling, and update order are all tied to the seed, and reductions
run in a fixed order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .model import LayerGraph, Softmax
from .rng import RandomStream


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float

    def as_dict(self):
        return {"epoch": self.epoch, "loss": self.loss, "accuracy": self.accuracy}


def _dataset_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(dataset, "as_arrays"):
        return dataset.as_arrays()
    x, y = dataset
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def _forward_collect(graph: LayerGraph, x):
    """Forward pass up to the logits, keeping each layer's input."""
    caches = []
    for layer in graph.layers:
        if isinstance(layer, Softmax):
            break
        caches.append(x)
        x = layer.forward(x)
    return x, caches


def _backward(graph: LayerGraph, caches, grad):
    """Backward pass; returns {(layer_index, attr): grad} for every param."""
    grads = {}
    n_layers = len(caches)
    for idx in range(n_layers - 1, -1, -1):
        layer = graph.layers[idx]
        need_input = idx > 0
        grad, pgrads = layer.backward(caches[idx], grad, need_input_grad=need_input)
        for attr, g in pgrads.items():
            grads[(idx, attr)] = g
    return grads


def evaluate_graph(graph: LayerGraph, dataset, batch_size: int = 64) -> float:
    """Classification accuracy of the graph's (rate-mode) forward pass."""
    x, y = _dataset_arrays(dataset)
    if len(x) == 0:
        raise tensor.EmptyDatasetError("cannot evaluate on an empty dataset")
    hits = 0
    for lo in range(0, len(x), batch_size):
        logits = graph.forward(x[lo : lo + batch_size], stop_before_softmax=True)
        hits += int((np.argmax(logits, axis=1) == y[lo : lo + batch_size]).sum())
    return hits / len(x)


def train(graph: LayerGraph, dataset, config: TrainConfig) -> tuple[LayerGraph, list[EpochStats]]:
    """Train a copy of the graph; returns (trained graph, per-epoch history).

    Raises EmptyDatasetError on an empty dataset, ValueError on out-of-range
    labels, and DivergenceError if the loss stops being finite.
    """
    x, y = _dataset_arrays(dataset)
    n = len(x)
    if n == 0:
        raise tensor.EmptyDatasetError("cannot train on an empty dataset")
    logits_dim = graph.shapes()[-1][-1]
    if y.min() < 0 or y.max() >= logits_dim:
        raise ValueError(
            f"labels must lie in [0, {logits_dim}), got range [{y.min()}, {y.max()}]"
        )

    graph = graph.copy()
    rng = RandomStream(config.seed)
    velocity = {
        (i, attr): np.zeros_like(arr) for i, attr, arr in graph.param_arrays()
    }
    history: list[EpochStats] = []

    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total_loss = 0.0
        hits = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb, yb = x[idx], y[idx]
            logits, caches = _forward_collect(graph, xb)
            loss = tensor.cross_entropy_loss(logits, yb)
            if not np.isfinite(loss):
                raise tensor.DivergenceError(
                    f"non-finite loss {loss} at epoch {epoch}, batch offset {lo}"
                )
            total_loss += loss * len(idx)
            hits += int((np.argmax(logits, axis=1) == yb).sum())
            grad = tensor.softmax_cross_entropy_grad(logits, yb)
            grads = _backward(graph, caches, grad)
            for key, g in grads.items():
                v = velocity[key]
                v *= config.momentum
                v += g
                i, attr = key
                arr = getattr(graph.layers[i], attr)
                arr -= config.lr * v
        history.append(EpochStats(epoch=epoch, loss=total_loss / n, accuracy=hits / n))
    return graph, history


def history_csv(history: list[EpochStats]) -> str:
    lines = ["epoch,loss,accuracy"]
    for h in history:
        lines.append(f"{h.epoch},{h.loss!r},{h.accuracy!r}")
    return "\n".join(lines) + "\n"
