"""Build data, model and select parts from a config and run every trial."""

from __future__ import annotations

import logging

from . import data as fdata
from .config import ExperimentConfig
from .delivery import DeliveryMode
from .models import MLP, SparseLogReg, SparseMLP
from .reporting import MetricsRow
from .selection.plans import WholeModelPlan
from .selection.strategies import KeyStrategy, mixed_counts
from .training import ServerOptimizer, SelectPart, TrainLoopConfig, run_trial

log = logging.getLogger(__name__)


def build_data(cfg: ExperimentConfig) -> fdata.FederatedSplits:
    task = cfg.task
    opts = dict(task.options)
    if task.kind == "synthetic_tag":
        return fdata.gen_sparse_tag_dataset(fdata.SyntheticTagConfig(seed=task.seed, **opts))
    if task.kind == "synthetic_dense":
        return fdata.gen_dense_task(seed=task.seed, **opts)
    mode = opts["mode"]
    train = fdata.load_client_shards(opts["train"], mode=mode, split="train")
    n, c = train.n_features, train.n_labels

    def load(key, split):
        if key not in opts:
            return None
        return fdata.load_client_shards(opts[key], mode=mode, n_features=n, n_labels=c, split=split)

    valid, test = load("valid", "valid"), load("test", "test")
    # without held-out shards, fall back to the nearest available split
    if test is None:
        test = valid if valid is not None else train
    return fdata.FederatedSplits(train, valid if valid is not None else test, test)


def build_model(cfg: ExperimentConfig, splits: fdata.FederatedSplits):
    n, c = splits.train.n_features, splits.train.n_labels
    kind = cfg.model.kind
    if kind == "sparse_logreg":
        return SparseLogReg(n, c)
    if kind == "mlp":
        return MLP(n, cfg.model.hidden, c)
    return SparseMLP(n, cfg.model.embed, cfg.model.hidden, c)


def build_parts(cfg: ExperimentConfig, model):
    """Select parts for the configured plan; ``None`` means the broadcast baseline."""
    sel = cfg.selection
    layout = model.layout()
    if sel.plan == "none":
        return None
    if sel.plan == "identity":
        return [SelectPart("model", WholeModelPlan(layout), KeyStrategy("all"))]
    plans = model.plans(layout)
    if sel.plan == "row":
        return [SelectPart("features", plans["features"], KeyStrategy(sel.strategy, sel.m))]
    if sel.plan == "neuron":
        return [SelectPart("neurons", plans["neurons"], KeyStrategy(sel.strategy, sel.m, sel.shared_per_round))]
    m_struct, m_rand = mixed_counts(sel.alpha, model.n_features, model.n_hidden)
    return [
        SelectPart("features", plans["features"], KeyStrategy("top", m_struct)),
        SelectPart("neurons", plans["neurons"], KeyStrategy("uniform", m_rand, sel.shared_per_round)),
    ]


def loop_config(cfg: ExperimentConfig) -> TrainLoopConfig:
    tr = cfg.training
    return TrainLoopConfig(
        rounds=tr.rounds, cohort_size=tr.cohort_size, client_lr=tr.client_lr, epochs=tr.epochs,
        batch_size=tr.batch_size, eval_every=tr.eval_every, trials=tr.trials, seed=tr.seed,
        weighted=tr.weighted,
    )


def trial_rows(result, model_size: int) -> list:
    """Metrics rows for one trial with cumulative accounting columns."""
    rows = []
    at_round = {}
    down = up = psi = wasted = peak = 0
    for st in result.rounds:
        down += st.scalars_down_total
        up += st.scalars_up_total
        psi += st.psi_evals
        wasted += st.wasted_slices
        peak = max(peak, st.max_client_params)
        at_round[st.round] = (down, up, psi, wasted, peak / model_size)
        for name, value in sorted(st.metrics.items()):
            rows.append(MetricsRow(result.trial, st.round, "train", name, float(value), *at_round[st.round]))
    for t, phase, metric, value in result.evals:
        rows.append(MetricsRow(result.trial, t, phase, metric, float(value), *at_round[t]))
    return rows


def run_experiment(cfg: ExperimentConfig, splits=None, history=None) -> list:
    """Run every trial of ``cfg`` and return its metrics rows.

    ``history``, when given, is a dict filled with one list of flat model
    vectors per trial (one entry per round).
    """
    if splits is None:
        splits = build_data(cfg)
    model = build_model(cfg, splits)
    parts = build_parts(cfg, model)
    delivery = DeliveryMode(cfg.delivery.mode, cfg.delivery.cache)
    tr = cfg.training
    loop = loop_config(cfg)
    metric = model.default_metric

    def opt_factory():
        return ServerOptimizer(tr.optimizer, tr.server_lr, tr.tau, tr.beta1, tr.beta2)

    rows = []
    size = model.layout().size
    for trial in range(tr.trials):
        hist = None
        if history is not None:
            hist = history.setdefault(trial, [])
        result = run_trial(model, splits, parts, delivery, opt_factory, loop, trial, metric,
                           cfg.selection.normalize, history=hist)
        log.info("trial %d done: %s", trial, result.evals[-1])
        rows.extend(trial_rows(result, size))
    return rows
