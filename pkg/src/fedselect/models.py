"""Local losses with explicit gradients, model-delta client updates, metrics.

Three desk-scale models share one calling convention: parameters are a
``dict`` of arrays (either the full server model or a client's sub-model)
and data arrive as a :class:`SparseBatch` or :class:`DenseBatch`.

* :class:`SparseLogReg` -- one-vs-rest logistic regression on sparse
  bag-of-words input; ``W`` has one row per feature.
* :class:`MLP` -- one tanh hidden layer with softmax output on dense input.
* :class:`SparseMLP` -- a feature embedding ``E`` followed by the same
  hidden layer, with sigmoid outputs over tags.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .exceptions import EmptyDataset, FeatureNotInSlice, ShapeMismatch
from .selection.params import BlockedParams, Layout
from .selection.plans import NeuronSelect, RowSelect


@dataclass(frozen=True)
class SparseExample:
    indices: tuple
    values: tuple
    labels: frozenset

    def __post_init__(self):
        idx = self.indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"indices must be strictly increasing: {idx}")
        if len(self.values) != len(idx):
            raise ShapeMismatch("indices and values differ in length")


@dataclass(frozen=True)
class DenseExample:
    features: tuple
    label: int


class SparseBatch:
    """CSR-style stack of sparse examples with a multi-hot target matrix."""

    def __init__(self, indptr, indices, values, targets):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        self.targets = np.asarray(targets, dtype=np.float64)
        self.rows = np.repeat(np.arange(len(self.indptr) - 1), np.diff(self.indptr))

    @classmethod
    def from_examples(cls, examples: Sequence[SparseExample], n_labels: int) -> "SparseBatch":
        lengths = [len(ex.indices) for ex in examples]
        indptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        indices = np.fromiter((i for ex in examples for i in ex.indices), dtype=np.int64, count=indptr[-1])
        values = np.fromiter((v for ex in examples for v in ex.values), dtype=np.float64, count=indptr[-1])
        targets = np.zeros((len(examples), n_labels))
        for r, ex in enumerate(examples):
            targets[r, list(ex.labels)] = 1.0
        return cls(indptr, indices, values, targets)

    def __len__(self):
        return len(self.indptr) - 1

    def take(self, rows) -> "SparseBatch":
        rows = np.asarray(rows, dtype=np.int64)
        starts, stops = self.indptr[rows], self.indptr[rows + 1]
        lengths = stops - starts
        if lengths.sum():
            gather = np.concatenate([np.arange(a, b) for a, b in zip(starts, stops)])
        else:
            gather = np.zeros(0, dtype=np.int64)
        indptr = np.concatenate([[0], np.cumsum(lengths)])
        return SparseBatch(indptr, self.indices[gather], self.values[gather], self.targets[rows])

    def feature_counts(self, n_features: int) -> np.ndarray:
        """Number of examples in which each feature occurs."""
        return np.bincount(self.indices, minlength=n_features).astype(np.float64)

    def localize(self, features: Sequence[int], n_features: int) -> "SparseBatch":
        """Re-index onto the positions of ``features``, dropping all other features."""
        pos = np.full(n_features, -1, dtype=np.int64)
        pos[np.asarray(features, dtype=np.int64)] = np.arange(len(features))
        local = pos[self.indices]
        keep = local >= 0
        kept_per_row = np.bincount(self.rows[keep], minlength=len(self))
        indptr = np.concatenate([[0], np.cumsum(kept_per_row)])
        return SparseBatch(indptr, local[keep], self.values[keep], self.targets)


class DenseBatch:
    def __init__(self, X, y, n_classes: int):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.n_classes = n_classes
        self.targets = np.zeros((len(self.y), n_classes))
        self.targets[np.arange(len(self.y)), self.y] = 1.0

    @classmethod
    def from_examples(cls, examples: Sequence[DenseExample], n_classes: int) -> "DenseBatch":
        X = np.array([ex.features for ex in examples], dtype=np.float64)
        y = np.array([ex.label for ex in examples], dtype=np.int64)
        return cls(X.reshape(len(examples), -1), y, n_classes)

    def __len__(self):
        return len(self.y)

    def take(self, rows) -> "DenseBatch":
        rows = np.asarray(rows, dtype=np.int64)
        return DenseBatch(self.X[rows], self.y[rows], self.n_classes)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce_sum(logits, targets):
    # sum over labels of log(1 + e^z) - y z
    return (np.logaddexp(0.0, logits) - targets * logits).sum(axis=1)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _sparse_matmul(batch: SparseBatch, table: np.ndarray) -> np.ndarray:
    out = np.zeros((len(batch), table.shape[1]))
    np.add.at(out, batch.rows, batch.values[:, None] * table[batch.indices])
    return out


def _sparse_grad(batch: SparseBatch, upstream: np.ndarray, n_rows: int) -> np.ndarray:
    grad = np.zeros((n_rows, upstream.shape[1]))
    np.add.at(grad, batch.indices, batch.values[:, None] * upstream[batch.rows])
    return grad


def _output_loss(logits, targets, output: str):
    """Mean loss and d(loss)/d(logits) for a batch."""
    B = len(targets)
    if output == "softmax":
        p = _softmax(logits)
        picked = np.log(np.maximum((p * targets).sum(axis=1), 1e-300))
        return -picked.mean(), (p - targets) / B
    return _bce_sum(logits, targets).mean(), (_sigmoid(logits) - targets) / B


def _map_features(batch: SparseBatch, active_features, n_rows: int) -> SparseBatch:
    if active_features is None:
        if batch.indices.size and batch.indices.max() >= n_rows:
            raise FeatureNotInSlice(f"feature {int(batch.indices.max())} outside a table of {n_rows} rows")
        return batch
    active = np.asarray(active_features, dtype=np.int64)
    if active.size != n_rows:
        raise ShapeMismatch(f"{active.size} active features for a table of {n_rows} rows")
    size = int(max(active.max(initial=-1), batch.indices.max(initial=-1))) + 1
    pos = np.full(size, -1, dtype=np.int64)
    pos[active] = np.arange(active.size)
    local = pos[batch.indices]
    if np.any(local < 0):
        missing = int(batch.indices[np.argmax(local < 0)])
        raise FeatureNotInSlice(f"feature {missing} is not in the selected slice")
    return SparseBatch(batch.indptr, local, batch.values, batch.targets)


def loss_and_grad_logreg(params: dict, batch: SparseBatch, active_features=None):
    """One-vs-rest logistic loss (mean over the batch) and its exact gradient.

    ``params`` holds ``W`` (one row per feature, one column per tag) and
    ``b``.  When ``active_features`` is given, ``W`` is a slice whose row
    ``i`` belongs to feature ``active_features[i]``.
    """
    W, b = params["W"], params["b"]
    local = _map_features(batch, active_features, W.shape[0])
    if len(local) == 0:
        raise EmptyDataset("empty batch")
    logits = _sparse_matmul(local, W) + b
    loss, dlogits = _output_loss(logits, local.targets, "sigmoid")
    return loss, {"W": _sparse_grad(local, dlogits, W.shape[0]), "b": dlogits.sum(axis=0)}


def loss_and_grad_mlp(params: dict, batch, active_neurons=None, active_features=None, output=None):
    """Loss and exact gradient of a tanh MLP, optionally with an input embedding.

    Dense batches use softmax cross-entropy; sparse batches go through the
    embedding ``E`` and use one-vs-rest sigmoid outputs.  The hidden layer
    is whatever ``W1``/``b1``/``W2`` hold, so a sub-network built from a
    subset of hidden units trains exactly that subset.
    """
    W1, b1, W2, b2 = params["W1"], params["b1"], params["W2"], params["b2"]
    hidden = b1.shape[0]
    if W1.shape[1] != hidden or W2.shape[0] != hidden:
        raise ShapeMismatch(f"hidden layer shapes disagree: {W1.shape}, {b1.shape}, {W2.shape}")
    if active_neurons is not None and len(active_neurons) != hidden:
        raise ShapeMismatch(f"{len(active_neurons)} active neurons for a hidden layer of {hidden}")
    if len(batch) == 0:
        raise EmptyDataset("empty batch")
    sparse = isinstance(batch, SparseBatch)
    if sparse:
        E = params["E"]
        batch = _map_features(batch, active_features, E.shape[0])
        a0 = _sparse_matmul(batch, E)
    else:
        a0 = batch.X
        if a0.shape[1] != W1.shape[0]:
            raise ShapeMismatch(f"inputs have {a0.shape[1]} features, W1 expects {W1.shape[0]}")
    output = output or ("sigmoid" if sparse else "softmax")
    a1 = np.tanh(a0 @ W1 + b1)
    logits = a1 @ W2 + b2
    loss, dz2 = _output_loss(logits, batch.targets, output)
    dz1 = (dz2 @ W2.T) * (1.0 - a1 * a1)
    grads = {"W1": a0.T @ dz1, "b1": dz1.sum(axis=0), "W2": a1.T @ dz2, "b2": dz2.sum(axis=0)}
    if sparse:
        grads["E"] = _sparse_grad(batch, dz1 @ W1.T, params["E"].shape[0])
    return loss, grads


class ParamPacker:
    """Flattens a dict of arrays in a fixed key order and back."""

    def __init__(self, template: dict):
        self.names = tuple(template)
        self.shapes = tuple(np.shape(template[k]) for k in self.names)
        sizes = [int(np.prod(s, dtype=np.int64)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def pack(self, arrays: dict) -> np.ndarray:
        if not self.names:
            return np.zeros(0)
        return np.concatenate([np.ravel(arrays[k]) for k in self.names]).astype(np.float64)

    def unpack(self, flat: np.ndarray) -> dict:
        return {
            k: flat[self.offsets[i]:self.offsets[i + 1]].reshape(self.shapes[i])
            for i, k in enumerate(self.names)
        }


@dataclass
class LocalLoss:
    """A client's loss ``g_n``: ``fn(y, rows)`` returns the mean loss over
    examples ``rows`` and its gradient with respect to the flat vector ``y``."""

    fn: Callable
    n_examples: int

    def __post_init__(self):
        if self.n_examples < 1:
            raise EmptyDataset("a client needs at least one example")


def local_sgd(y0, loss: LocalLoss, epochs: int, batch_size: int, lr: float, rng):
    """Minibatch SGD from ``y0``; returns the final parameters and mean step loss."""
    if lr < 0:
        raise ValueError("client learning rate must be non-negative")
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    y = np.array(y0, dtype=np.float64, copy=True)
    n = loss.n_examples
    total, steps = 0.0, 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            value, grad = loss.fn(y, order[start:start + batch_size])
            y = y - lr * grad
            total += value
            steps += 1
    return y, total / steps


def client_update_model_delta(y0, loss: LocalLoss, epochs: int, batch_size: int, lr: float, rng):
    """Model delta ``u = y0 - y'`` after ``epochs`` of local minibatch SGD."""
    y0 = np.asarray(y0, dtype=np.float64)
    y_final, _ = local_sgd(y0, loss, epochs, batch_size, lr, rng)
    return y0 - y_final


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(loss_fn, params, tolerance=1e-4, n_coords=100, h=1e-6, rng=None, floor=1e-5):
    """Compare an analytic gradient against central differences.

    ``loss_fn(flat) -> (loss, grad)``.  Checks ``n_coords`` random
    coordinates (all of them when the vector is smaller).  The relative
    error denominator is ``max(|analytic| + |numeric|, floor)``.
    """
    params = np.array(params, dtype=np.float64, copy=True)
    rng = np.random.default_rng(0) if rng is None else rng
    _, grad = loss_fn(params)
    grad = np.asarray(grad, dtype=np.float64)
    if params.size <= n_coords:
        coords = np.arange(params.size)
    else:
        coords = rng.choice(params.size, size=n_coords, replace=False)
    worst = 0.0
    for c in coords:
        old = params[c]
        params[c] = old + h
        up, _ = loss_fn(params)
        params[c] = old - h
        down, _ = loss_fn(params)
        params[c] = old
        numeric = (up - down) / (2 * h)
        err = abs(numeric - grad[c]) / max(abs(numeric) + abs(grad[c]), floor)
        worst = max(worst, err)
    return GradCheckReport(worst, len(coords), tolerance)


def accuracy(scores: np.ndarray, labels) -> float:
    scores = np.asarray(scores)
    if scores.shape[0] == 0:
        raise EmptyDataset("empty evaluation set")
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels)))


def recall_at_k(scores: np.ndarray, targets: np.ndarray, k: int = 5) -> float:
    """Mean over examples of |top-k predicted ∩ true| / |true|.

    Ties in the ranking go to the smaller label id; examples without true
    labels are skipped.
    """
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    if scores.shape[0] == 0:
        raise EmptyDataset("empty evaluation set")
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    hits = np.take_along_axis(targets, top, axis=1).sum(axis=1)
    n_true = targets.sum(axis=1)
    keep = n_true > 0
    if not keep.any():
        raise EmptyDataset("no example has a true label")
    return float(np.mean(hits[keep] / n_true[keep]))


class Model:
    """Common surface of the three desk-scale models."""

    name = "model"
    input_kind = "sparse"
    default_metric = "recall_at_5"

    def layout(self) -> Layout:
        raise NotImplementedError

    def init(self, rng) -> BlockedParams:
        raise NotImplementedError

    def plans(self, layout: Layout) -> dict:
        """Selectable parts keyed by name: ``features`` and/or ``neurons``."""
        raise NotImplementedError

    def loss_and_grad(self, params: dict, batch):
        raise NotImplementedError

    def scores(self, params: dict, batch) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, params, batch, metric: str | None = None) -> float:
        return evaluate(self, params, batch, metric or self.default_metric)


class SparseLogReg(Model):
    name = "sparse_logreg"

    def __init__(self, n_features: int, n_tags: int, init_scale: float = 0.01):
        self.n_features = n_features
        self.n_tags = n_tags
        self.init_scale = init_scale

    def layout(self):
        return Layout([("W", (self.n_features, self.n_tags)), ("b", (self.n_tags,), True)])

    def init(self, rng):
        x = BlockedParams(self.layout())
        x["W"][...] = self.init_scale * rng.standard_normal((self.n_features, self.n_tags))
        return x

    def plans(self, layout):
        return {"features": RowSelect(layout, "W")}

    def loss_and_grad(self, params, batch):
        return loss_and_grad_logreg(params, batch)

    def scores(self, params, batch):
        return _sparse_matmul(batch, params["W"]) + params["b"]


class MLP(Model):
    name = "mlp"
    input_kind = "dense"
    default_metric = "accuracy"

    def __init__(self, n_inputs: int, n_hidden: int, n_classes: int):
        self.n_inputs = n_inputs
        self.n_hidden = n_hidden
        self.n_classes = n_classes

    def layout(self):
        d, h, c = self.n_inputs, self.n_hidden, self.n_classes
        return Layout([("W1", (d, h)), ("b1", (h,)), ("W2", (h, c)), ("b2", (c,), True)])

    def init(self, rng):
        x = BlockedParams(self.layout())
        x["W1"][...] = rng.standard_normal(x["W1"].shape) * np.sqrt(1.0 / self.n_inputs)
        x["W2"][...] = rng.standard_normal(x["W2"].shape) * np.sqrt(1.0 / self.n_hidden)
        return x

    def plans(self, layout):
        return {"neurons": NeuronSelect(layout, "W1", "b1", "W2")}

    def loss_and_grad(self, params, batch):
        return loss_and_grad_mlp(params, batch)

    def scores(self, params, batch):
        return np.tanh(batch.X @ params["W1"] + params["b1"]) @ params["W2"] + params["b2"]


class SparseMLP(Model):
    name = "sparse_mlp"

    def __init__(self, n_features: int, n_embed: int, n_hidden: int, n_tags: int):
        self.n_features = n_features
        self.n_embed = n_embed
        self.n_hidden = n_hidden
        self.n_tags = n_tags

    def layout(self):
        n, e, h, t = self.n_features, self.n_embed, self.n_hidden, self.n_tags
        return Layout([("E", (n, e)), ("W1", (e, h)), ("b1", (h,)), ("W2", (h, t)), ("b2", (t,), True)])

    def init(self, rng):
        x = BlockedParams(self.layout())
        x["E"][...] = rng.standard_normal(x["E"].shape) * 0.1
        x["W1"][...] = rng.standard_normal(x["W1"].shape) * np.sqrt(1.0 / self.n_embed)
        x["W2"][...] = rng.standard_normal(x["W2"].shape) * np.sqrt(1.0 / self.n_hidden)
        return x

    def plans(self, layout):
        return {"features": RowSelect(layout, "E"), "neurons": NeuronSelect(layout, "W1", "b1", "W2")}

    def loss_and_grad(self, params, batch):
        return loss_and_grad_mlp(params, batch)

    def scores(self, params, batch):
        a0 = _sparse_matmul(batch, params["E"])
        return np.tanh(a0 @ params["W1"] + params["b1"]) @ params["W2"] + params["b2"]


def evaluate(model: Model, params, batch, metric: str = "accuracy") -> float:
    """Score the full server model on ``batch``.

    ``metric`` is ``"accuracy"`` or ``"recall_at_k"`` / ``"recall_at_<k>"``.
    """
    if isinstance(params, BlockedParams):
        params = params.as_dict()
    if len(batch) == 0:
        raise EmptyDataset("empty evaluation set")
    scores = model.scores(params, batch)
    if metric == "accuracy":
        return accuracy(scores, np.argmax(batch.targets, axis=1))
    if metric.startswith("recall_at_"):
        k = metric[len("recall_at_"):]
        return recall_at_k(scores, batch.targets, int(k) if k not in ("", "k") else 5)
    raise ValueError(f"unknown metric {metric!r}")
