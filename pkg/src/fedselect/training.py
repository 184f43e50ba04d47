"""Federated training rounds, server optimizers and multi-trial experiments.

``run_round_baseline`` broadcasts the whole model to every cohort member;
``run_round_select`` lets each client choose keys, receive only the
matching slices, and sends back slice updates that the server deselects.
Both finish with the same first-order server step on the averaged model
delta.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .delivery import DeliveryMode, deliver
from .exceptions import CohortTooLarge, EmptyCohort, ShapeMismatch
from .fedcore import CommLedger, aggregate_mean, aggregate_mean_deselect, broadcast, clients, server
from .models import LocalLoss, Model, ParamPacker, SparseBatch, local_sgd
from .selection.params import BlockedParams
from .selection.plans import SelectPlan, WholeModelPlan
from .selection.strategies import KeyStrategy

log = logging.getLogger(__name__)

LR_GRID = tuple(10.0 ** i for i in range(-3, 2))


class ServerOptimizer:
    """First-order server step treating the averaged update as a gradient.

    ``kind`` is ``"sgd"``, ``"adagrad"`` or ``"adam"``.  State vectors are
    allocated lazily on the first step and are only touched by
    :meth:`step`.
    """

    def __init__(self, kind="sgd", lr=1.0, tau=1e-7, beta1=0.9, beta2=0.999):
        if kind not in ("sgd", "adagrad", "adam"):
            raise ValueError(f"unknown server optimizer {kind!r}")
        if kind != "sgd" and tau <= 0:
            raise ValueError("tau must be positive for adaptive optimizers")
        self.kind = kind
        self.lr = lr
        self.tau = tau
        self.beta1 = beta1
        self.beta2 = beta2
        self.v = None
        self.mom = None
        self.steps = 0

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        if x.shape != u.shape:
            raise ShapeMismatch(f"update shape {u.shape} does not match model shape {x.shape}")
        if self.v is not None and self.v.shape != x.shape:
            raise ShapeMismatch("optimizer state does not match the model")
        self.steps += 1
        if self.kind == "sgd":
            return x - self.lr * u
        if self.v is None:
            self.v = np.zeros_like(x)
            self.mom = np.zeros_like(x)
        if self.kind == "adagrad":
            self.v += u * u
            return x - self.lr * u / (np.sqrt(self.v) + self.tau)
        self.mom = self.beta1 * self.mom + (1 - self.beta1) * u
        self.v = self.beta2 * self.v + (1 - self.beta2) * u * u
        m_hat = self.mom / (1 - self.beta1 ** self.steps)
        v_hat = self.v / (1 - self.beta2 ** self.steps)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.tau)


def server_update(opt: ServerOptimizer, x, u):
    """Apply one optimizer step; accepts a flat vector or ``BlockedParams``."""
    if isinstance(x, BlockedParams):
        return x.with_flat(opt.step(x.flat, u))
    return opt.step(x, u)


@dataclass
class TrainLoopConfig:
    rounds: int = 100
    cohort_size: int = 10
    client_lr: float = 0.1
    epochs: int = 1
    batch_size: int = 10
    eval_every: int = 10
    trials: int = 1
    seed: int = 0
    weighted: bool = False

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.cohort_size < 1:
            raise ValueError("cohort_size must be at least 1")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1 or self.trials < 1:
            raise ValueError("epochs, batch_size, eval_every and trials must be positive")


@dataclass
class RoundStats:
    round: int = 0
    metrics: dict = field(default_factory=dict)
    scalars_down_total: int = 0
    scalars_up_total: int = 0
    psi_evals: int = 0
    client_psi_evals: int = 0
    wasted_slices: int = 0
    cache_hits: int = 0
    max_client_params: int = 0
    model_size: int = 0


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from integers and short strings."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode("utf-8"))
        else:
            words.append(int(p))
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


class Seeds:
    """Seed derivation for one trial: ``hash(seed, trial, round, purpose, ...)``."""

    def __init__(self, seed: int, trial: int):
        self.seed = seed
        self.trial = trial

    def init(self) -> int:
        return derive_seed(self.seed, self.trial, "init")

    def cohort(self, t: int) -> int:
        return derive_seed(self.seed, self.trial, t, "cohort")

    def shared_keys(self, t: int, part: int) -> int:
        return derive_seed(self.seed, t, "shared", self.trial, part)

    def client_rng(self, t: int, client: int) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.seed, self.trial, t, "client", client))

    def key_rng(self, t: int, client: int, part: int = 0) -> np.random.Generator:
        return np.random.default_rng(derive_seed(self.seed, self.trial, t, "keys", client, part))


def sample_cohort(client_pool: Sequence[int], cohort_size: int, round_seed) -> list:
    """Uniform sample without replacement, deterministic in ``round_seed``."""
    pool = list(client_pool)
    if cohort_size > len(pool):
        raise CohortTooLarge(f"cohort of {cohort_size} from a pool of {len(pool)}")
    if cohort_size < 1:
        raise EmptyCohort("cohort_size must be at least 1")
    rng = np.random.default_rng(round_seed)
    picks = rng.choice(len(pool), size=cohort_size, replace=False)
    return [pool[i] for i in picks]


@dataclass(frozen=True)
class SelectPart:
    """One selectable part of the model with its client key strategy."""

    name: str
    plan: SelectPlan
    strategy: KeyStrategy


def _local_loss(model: Model, batch, packer: ParamPacker) -> LocalLoss:
    def fn(y, rows):
        loss, grads = model.loss_and_grad(packer.unpack(y), batch.take(rows))
        return loss, packer.pack(grads)

    return LocalLoss(fn, len(batch))


def _train_client(model, local: dict, batch, cfg: TrainLoopConfig, rng):
    packer = ParamPacker(local)
    y0 = packer.pack(local)
    y1, loss = local_sgd(y0, _local_loss(model, batch, packer), cfg.epochs, cfg.batch_size, cfg.client_lr, rng)
    return packer.unpack(y0 - y1), loss


def run_round_baseline(x: BlockedParams, model: Model, cohort, data, opt: ServerOptimizer,
                       cfg: TrainLoopConfig, seeds: Seeds, t: int = 0):
    """Broadcast the whole model, train locally, average model deltas, step."""
    ledger = CommLedger()
    received = broadcast(server(x), cohort, ledger)
    updates, losses, weights = [], [], []
    for client_id, xc in received.items():
        client = data.by_id(client_id)
        local = {name: np.array(xc[name]) for name in x.layout.names}
        delta, loss = _train_client(model, local, client.batch, cfg, seeds.client_rng(t, client_id))
        update = np.concatenate([np.ravel(delta[name]) for name in x.layout.names])
        ledger.up(client_id, update.size)
        updates.append(update)
        losses.append(loss)
        weights.append(len(client))
    u = aggregate_mean(clients(updates, received.cohort), weights if cfg.weighted else None).payload
    x_new = server_update(opt, x, u)
    stats = RoundStats(
        round=t,
        metrics={"loss": float(np.mean(losses))},
        scalars_down_total=ledger.total_down,
        scalars_up_total=ledger.total_up,
        max_client_params=x.size,
        model_size=x.size,
    )
    return x_new, stats


def _slice_parts(value) -> tuple:
    return value if isinstance(value, tuple) else (value,)


def _assemble(x: BlockedParams, part: SelectPart, slices: list, local: dict) -> None:
    plan = part.plan
    if isinstance(plan, WholeModelPlan):
        for name, arr in zip(plan.blocks, slices[0]):
            local[name] = np.array(arr)
        return
    for i, (name, axis) in enumerate(plan.axes.items()):
        if slices:
            local[name] = np.stack([_slice_parts(s)[i] for s in slices], axis=axis)
        else:
            shape = list(x.layout[name].shape)
            shape[axis] = 0
            local[name] = np.zeros(shape)


def _split(part: SelectPart, delta: dict, n_keys: int) -> list:
    plan = part.plan
    if isinstance(plan, WholeModelPlan):
        return [tuple(delta[name] for name in plan.blocks)]
    axes = list(plan.axes.items())
    out = []
    for p in range(n_keys):
        pieces = tuple(np.take(delta[name], p, axis=axis) for name, axis in axes)
        out.append(pieces if len(pieces) > 1 else pieces[0])
    return out


def _choose_keys(part: SelectPart, index: int, client, n_features: int, seeds: Seeds, t: int):
    counts = None
    if part.strategy.structured:
        counts = client.batch.feature_counts(n_features)
    return part.strategy.choose(
        part.plan.K,
        counts=counts,
        rng=seeds.key_rng(t, client.client_id, index),
        round_seed=seeds.shared_keys(t, index),
    )


def run_round_select(x: BlockedParams, model: Model, parts: Sequence[SelectPart], delivery: DeliveryMode,
                     cohort, data, opt: ServerOptimizer, cfg: TrainLoopConfig, seeds: Seeds, t: int = 0,
                     normalize: str = "cohort"):
    """One round of training with federated select.

    Each client picks keys per part, receives its slices through
    ``delivery`` together with the broadcast-only blocks, runs local SGD on
    the assembled sub-model, and uploads per-key slice updates.  The server
    deselects and averages them, averages the broadcast-block updates, and
    takes one optimizer step.
    """
    layout = x.layout
    cohort = list(cohort)
    if not cohort:
        raise EmptyCohort("empty cohort")
    selected = {name for part in parts for name in part.plan.blocks}
    bcast_names = [name for name in layout.names if name not in selected]
    bcast_size = sum(layout[name].size for name in bcast_names)
    n_features = getattr(data, "n_features", 0)

    keys = {}
    for i, part in enumerate(parts):
        per_client = [_choose_keys(part, i, data.by_id(c), n_features, seeds, t) for c in cohort]
        keys[part.name] = clients(per_client, cohort)

    stats = RoundStats(round=t, model_size=x.size)
    delivered = {}
    params_held = {c: 0 for c in cohort}
    for i, part in enumerate(parts):
        fused = bcast_size if i == 0 else 0
        delivered[part.name], dstats = deliver(delivery, server(x), keys[part.name], part.plan, fused)
        if delivery.kind == "broadcast_compute":
            if i == 0:
                stats.scalars_down_total += dstats.total_down
        else:
            stats.scalars_down_total += dstats.total_down
        stats.psi_evals += dstats.psi_evals
        stats.client_psi_evals += dstats.client_psi_evals
        stats.wasted_slices += dstats.wasted_slices
        stats.cache_hits += dstats.cache_hits
        for c, held in dstats.client_params.items():
            params_held[c] += held
    stats.max_client_params = max(params_held.values())
    bcast = broadcast(server({name: x[name] for name in bcast_names}), cohort) if bcast_names else None

    slice_updates = {part.name: [] for part in parts}
    bcast_updates, losses, weights = [], [], []
    for j, client_id in enumerate(cohort):
        client = data.by_id(client_id)
        local = {}
        for part in parts:
            _assemble(x, part, delivered[part.name][j], local)
        if bcast is not None:
            for name, arr in bcast[j].items():
                local[name] = np.array(arr)
        local = {name: local[name] for name in layout.names}
        batch = client.batch
        if "features" in keys and isinstance(batch, SparseBatch):
            batch = batch.localize(keys["features"][j], layout[_feature_block(parts)].shape[0])
        delta, loss = _train_client(model, local, batch, cfg, seeds.client_rng(t, client_id))
        for part in parts:
            slice_updates[part.name].append(_split(part, delta, len(keys[part.name][j])))
        if bcast_names:
            bcast_updates.append(np.concatenate([np.ravel(delta[name]) for name in bcast_names]))
        stats.scalars_up_total += sum(np.size(v) for v in delta.values())
        losses.append(loss)
        weights.append(len(client))

    w = weights if cfg.weighted else None
    u = np.zeros(layout.size)
    for part in parts:
        u += aggregate_mean_deselect(
            clients(slice_updates[part.name], cohort), keys[part.name], part.plan, normalize, w
        ).payload
    if bcast_names:
        mean = aggregate_mean(clients(bcast_updates, cohort), w).payload
        coords = np.concatenate([layout.index(name).ravel() for name in bcast_names])
        u[coords] += mean
    stats.metrics["loss"] = float(np.mean(losses))
    return server_update(opt, x, u), stats


def _feature_block(parts) -> str:
    for part in parts:
        if part.name == "features":
            return part.plan.block
    raise KeyError("no feature part")


@dataclass
class TrialResult:
    trial: int
    rounds: list
    evals: list
    final_params: BlockedParams = field(repr=False, default=None)


def run_trial(model: Model, splits, parts, delivery: DeliveryMode, opt_factory, cfg: TrainLoopConfig,
              trial: int, eval_metric: str, normalize: str = "cohort", eval_split: str = "valid",
              history: list | None = None):
    """Run ``cfg.rounds`` rounds of one trial.

    ``parts=None`` runs the baseline (broadcast) algorithm.  Evaluation
    uses the full server model on held-out clients every ``eval_every``
    rounds and after the final round; the final round is also scored on
    the test split.
    """
    seeds = Seeds(cfg.seed, trial)
    x = model.init(np.random.default_rng(seeds.init()))
    opt = opt_factory()
    train = splits.train
    held_out = getattr(splits, eval_split, None) or splits.test
    round_stats, evals = [], []
    for t in range(1, cfg.rounds + 1):
        cohort = sample_cohort(train.client_ids, min(cfg.cohort_size, len(train)), seeds.cohort(t))
        if parts is None:
            x, st = run_round_baseline(x, model, cohort, train, opt, cfg, seeds, t)
        else:
            x, st = run_round_select(x, model, parts, delivery, cohort, train, opt, cfg, seeds, t, normalize)
        round_stats.append(st)
        if history is not None:
            history.append(x.flat.copy())
        if t % cfg.eval_every == 0 or t == cfg.rounds:
            evals.append((t, "valid", eval_metric, model.evaluate(x, held_out.pooled(), eval_metric)))
        if t == cfg.rounds:
            evals.append((t, "test", eval_metric, model.evaluate(x, splits.test.pooled(), eval_metric)))
    return TrialResult(trial, round_stats, evals, x)
