"""scikit-learn style wrappers around federated training.

Rows of ``X`` are grouped into clients by the ``groups`` argument of
``fit``; each round samples a cohort of those clients.  After fitting,
prediction uses the full server model like any other estimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import ClientData, FederatedDataset, FederatedSplits
from .delivery import DeliveryMode
from .models import MLP, DenseBatch, DenseExample, SparseBatch, SparseExample, SparseLogReg, _sigmoid, recall_at_k
from .selection.strategies import KeyStrategy
from .training import ServerOptimizer, SelectPart, TrainLoopConfig, run_trial


def _group_clients(groups, n_rows):
    if groups is None:
        groups = np.zeros(n_rows, dtype=np.int64)
    groups = np.asarray(groups)
    if groups.shape != (n_rows,):
        raise ValueError(f"groups must have one entry per row, got shape {groups.shape}")
    _, client_of_row = np.unique(groups, return_inverse=True)
    return client_of_row


def _sparse_rows(X):
    """Yield (indices, values) per row of a dense array or scipy sparse matrix."""
    if hasattr(X, "tocsr"):
        X = X.tocsr()
        X.sort_indices()
        for r in range(X.shape[0]):
            lo, hi = X.indptr[r], X.indptr[r + 1]
            vals = X.data[lo:hi]
            keep = vals != 0
            yield tuple(X.indices[lo:hi][keep].tolist()), tuple(vals[keep].tolist())
        return
    for row in X:
        nz = np.flatnonzero(row)
        yield tuple(nz.tolist()), tuple(row[nz].tolist())


class _FederatedClassifier(ClassifierMixin, BaseEstimator):
    def _train(self, model, clients_, kind, n_features, n_labels, parts):
        data = FederatedDataset(clients_, kind, n_features, n_labels)
        splits = FederatedSplits(data, data, data)
        cfg = TrainLoopConfig(
            rounds=self.rounds, cohort_size=min(self.cohort_size, len(clients_)), client_lr=self.client_lr,
            epochs=self.epochs, batch_size=self.batch_size, eval_every=self.rounds, seed=self.random_state,
        )
        result = run_trial(
            model, splits, parts, DeliveryMode("on_demand"),
            lambda: ServerOptimizer(self.optimizer, self.server_lr), cfg, 0, model.default_metric,
        )
        self.params_ = result.final_params
        self.round_stats_ = result.rounds
        self.n_clients_ = len(clients_)
        return self


class FedSelectTagClassifier(_FederatedClassifier):
    """Multi-label sparse logistic regression trained with per-client row selection.

    Parameters
    ----------
    m : int or None
        Feature rows each client requests per round; ``None`` keeps the
        whole local support.
    strategy : str
        ``"top"``, ``"random"`` or ``"random_top"`` key choice.
    rounds, cohort_size, client_lr, server_lr, epochs, batch_size
        Federated training knobs.
    optimizer : str
        Server optimizer, ``"sgd"``, ``"adagrad"`` or ``"adam"``.
    threshold : float
        Probability cut-off used by :meth:`predict`.
    """

    def __init__(self, m=None, strategy="top", rounds=50, cohort_size=10, client_lr=0.1,
                 server_lr=1.0, epochs=1, batch_size=10, optimizer="sgd", threshold=0.5, random_state=0):
        self.m = m
        self.strategy = strategy
        self.rounds = rounds
        self.cohort_size = cohort_size
        self.client_lr = client_lr
        self.server_lr = server_lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.threshold = threshold
        self.random_state = random_state

    def fit(self, X, Y, groups=None):
        X, Y = check_X_y(X, Y, accept_sparse="csr", multi_output=True, dtype=np.float64)
        Y = np.asarray(Y)
        if Y.ndim != 2:
            raise ValueError("Y must be a 2-d label indicator matrix")
        client_of_row = _group_clients(groups, X.shape[0])
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = Y.shape[1]
        examples = [
            SparseExample(idx, vals, frozenset(np.flatnonzero(y).tolist()))
            for (idx, vals), y in zip(_sparse_rows(X), Y)
        ]
        clients_ = [
            ClientData(c, tuple(examples[r] for r in np.flatnonzero(client_of_row == c)))
            for c in range(client_of_row.max() + 1)
        ]
        self.model_ = SparseLogReg(self.n_features_in_, self.n_outputs_)
        plan = self.model_.plans(self.model_.layout())["features"]
        parts = [SelectPart("features", plan, KeyStrategy(self.strategy, self.m))]
        return self._train(self.model_, clients_, "sparse", self.n_features_in_, self.n_outputs_, parts)

    def _batch(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, accept_sparse="csr", dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        examples = [SparseExample(idx, vals, frozenset()) for idx, vals in _sparse_rows(X)]
        return SparseBatch.from_examples(examples, self.n_outputs_)

    def decision_function(self, X):
        batch = self._batch(X)
        return self.model_.scores(self.params_.as_dict(), batch)

    def predict_proba(self, X):
        return _sigmoid(self.decision_function(X))

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(np.int64)

    def score(self, X, Y, k=5):
        """Mean recall@k of the ranked tag scores."""
        return recall_at_k(self.decision_function(X), np.asarray(Y, dtype=np.float64), k)


class FedSelectMLPClassifier(_FederatedClassifier):
    """One-hidden-layer classifier where each client trains ``m`` random hidden units."""

    def __init__(self, hidden=32, m=None, shared_per_round=False, rounds=50, cohort_size=10, client_lr=0.1,
                 server_lr=1.0, epochs=1, batch_size=10, optimizer="sgd", random_state=0):
        self.hidden = hidden
        self.m = m
        self.shared_per_round = shared_per_round
        self.rounds = rounds
        self.cohort_size = cohort_size
        self.client_lr = client_lr
        self.server_lr = server_lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.random_state = random_state

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self._le = LabelEncoder().fit(y)
        self.classes_ = self._le.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = self._le.transform(y)
        client_of_row = _group_clients(groups, X.shape[0])
        self.n_features_in_ = X.shape[1]
        clients_ = [
            ClientData(c, tuple(DenseExample(tuple(X[r].tolist()), int(codes[r]))
                                for r in np.flatnonzero(client_of_row == c)))
            for c in range(client_of_row.max() + 1)
        ]
        self.model_ = MLP(self.n_features_in_, self.hidden, len(self.classes_))
        parts = None
        if self.m is not None:
            plan = self.model_.plans(self.model_.layout())["neurons"]
            parts = [SelectPart("neurons", plan, KeyStrategy("uniform", self.m, self.shared_per_round))]
        return self._train(self.model_, clients_, "dense", self.n_features_in_, len(self.classes_), parts)

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        batch = DenseBatch(X, np.zeros(len(X), dtype=np.int64), len(self.classes_))
        return self.model_.scores(self.params_.as_dict(), batch)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
