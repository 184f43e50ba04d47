"""Experiment configuration: a JSON document resolved into dataclasses.

Only ``task`` and ``model`` are required.  Every other field has a default;
``parse_config`` fills them in, rejects unknown keys with their dotted
path, and checks that the chosen task, model, plan and key strategy fit
together.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .exceptions import BadConfig, ConfigConflict, UnknownKey

SPARSE_TASK_OPTIONS = {
    "clients": int, "vocab": int, "tags": int, "valid_clients": int, "test_clients": int,
    "examples_per_client": tuple, "words_per_example": tuple, "background_words": tuple,
    "zipf_exponent": float, "topics": int, "topics_per_client": int, "topic_vocab": int,
    "tags_per_topic": int, "label_noise": float,
}
DENSE_TASK_OPTIONS = {
    "clients": int, "d": int, "c": int, "per_client": tuple, "heterogeneity": float,
    "valid_clients": int, "test_clients": int, "modes_per_class": int, "separation": float,
}
SHARD_TASK_OPTIONS = {"train": str, "valid": str, "test": str, "mode": str}

TASKS = ("synthetic_tag", "synthetic_dense", "shard_path")
MODELS = ("sparse_logreg", "mlp", "sparse_mlp")
PLANS = ("none", "identity", "row", "neuron", "mixed")
STRATEGIES = ("all", "top", "random", "random_top", "uniform", "mixed")
OPTIMIZERS = ("sgd", "adagrad", "adam")
DEFAULT_STRATEGY = {"none": "all", "identity": "all", "row": "top", "neuron": "uniform", "mixed": "mixed"}
PLAN_FOR_STRATEGY = {"top": "row", "random": "row", "random_top": "row", "uniform": "neuron", "mixed": "mixed"}


@dataclass
class TaskConfig:
    kind: str = "synthetic_tag"
    seed: int = 0
    options: dict = field(default_factory=dict)

    @property
    def input_kind(self) -> str:
        if self.kind == "synthetic_tag":
            return "sparse"
        if self.kind == "synthetic_dense":
            return "dense"
        return self.options.get("mode", "sparse")


@dataclass
class ModelConfig:
    kind: str = "sparse_logreg"
    hidden: int = 32
    embed: int = 16


@dataclass
class SelectionConfig:
    plan: str = "none"
    strategy: str = "all"
    m: int | None = None
    alpha: float = 1.0
    shared_per_round: bool = False
    normalize: str = "cohort"


@dataclass
class TrainingConfig:
    rounds: int = 100
    cohort_size: int = 10
    client_lr: float = 0.1
    server_lr: float = 0.1
    optimizer: str = "sgd"
    tau: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 1
    batch_size: int = 10
    eval_every: int = 10
    trials: int = 1
    seed: int = 0
    weighted: bool = False


@dataclass
class DeliveryConfig:
    mode: str = "on_demand"
    cache: str = "none"


@dataclass
class ExperimentConfig:
    task: TaskConfig
    model: ModelConfig
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    delivery: DeliveryConfig = field(default_factory=DeliveryConfig)
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _coerce(value, typ, path):
    if typ is bool:
        if not isinstance(value, bool):
            raise BadConfig(f"{path} must be a boolean")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise BadConfig(f"{path} must be an integer")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise BadConfig(f"{path} must be a number")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise BadConfig(f"{path} must be a string")
        return value
    if typ is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise BadConfig(f"{path} must be a [lo, hi] pair")
        return tuple(value)
    return value


_FIELD_TYPES = {"int": int, "float": float, "str": str, "bool": bool, "int | None": int}


def _section(cls, raw, path):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise BadConfig(f"{path} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise UnknownKey(f"{path}.{key}")
        typ = _FIELD_TYPES.get(str(fields[key].type))
        if value is None and str(fields[key].type).endswith("None"):
            kwargs[key] = None
        else:
            kwargs[key] = _coerce(value, typ, f"{path}.{key}")
    return cls(**kwargs)


def _task(raw) -> TaskConfig:
    if isinstance(raw, str):
        raw = {"kind": raw}
    if not isinstance(raw, dict) or "kind" not in raw:
        raise BadConfig("task must be a task name or an object with a kind")
    kind = raw["kind"]
    if kind not in TASKS:
        raise BadConfig(f"task.kind must be one of {TASKS}, got {kind!r}")
    allowed = {"synthetic_tag": SPARSE_TASK_OPTIONS, "synthetic_dense": DENSE_TASK_OPTIONS,
               "shard_path": SHARD_TASK_OPTIONS}[kind]
    options = {}
    seed = 0
    for key, value in raw.items():
        if key == "kind":
            continue
        if key == "seed":
            seed = _coerce(value, int, "task.seed")
            continue
        if key not in allowed:
            raise UnknownKey(f"task.{key}")
        options[key] = _coerce(value, allowed[key], f"task.{key}")
    if kind == "shard_path":
        if "train" not in options:
            raise BadConfig("shard_path tasks need task.train")
        if options.setdefault("mode", "sparse") not in ("sparse", "dense"):
            raise BadConfig("task.mode must be 'sparse' or 'dense'")
    return TaskConfig(kind, seed, options)


def _check_choice(value, choices, path):
    if value not in choices:
        raise BadConfig(f"{path} must be one of {choices}, got {value!r}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Cross-field checks; fills plan/strategy defaults implied by each other."""
    _check_choice(cfg.model.kind, MODELS, "model.kind")
    _check_choice(cfg.selection.plan, PLANS, "selection.plan")
    _check_choice(cfg.selection.strategy, STRATEGIES, "selection.strategy")
    _check_choice(cfg.selection.normalize, ("cohort", "key_count"), "selection.normalize")
    _check_choice(cfg.training.optimizer, OPTIMIZERS, "training.optimizer")
    _check_choice(cfg.delivery.mode, ("broadcast_compute", "on_demand", "pregenerated"), "delivery.mode")
    _check_choice(cfg.delivery.cache, ("none", "per_round"), "delivery.cache")

    sel, model, task = cfg.selection, cfg.model, cfg.task
    dense_task = task.input_kind == "dense"
    if dense_task and model.kind != "mlp":
        raise ConfigConflict(f"model {model.kind} needs sparse input but task {task.kind} is dense")
    if not dense_task and model.kind == "mlp":
        raise ConfigConflict(f"model mlp needs dense input but task {task.kind} is sparse")
    if sel.strategy in ("top", "random", "random_top") and (dense_task or model.kind == "mlp"):
        raise ConfigConflict(f"strategy {sel.strategy} needs sparse features; model is {model.kind}")
    if sel.plan == "none" and sel.strategy != "all":
        sel.plan = PLAN_FOR_STRATEGY[sel.strategy]
    elif sel.strategy == "all" and sel.plan in ("row", "neuron", "mixed"):
        sel.strategy = DEFAULT_STRATEGY[sel.plan]

    if sel.plan == "row":
        if model.kind == "mlp":
            raise ConfigConflict("row selection needs a sparse-input model")
        if sel.strategy not in ("top", "random", "random_top", "all"):
            raise ConfigConflict(f"row selection cannot use strategy {sel.strategy}")
    elif sel.plan == "neuron":
        if model.kind == "sparse_logreg":
            raise ConfigConflict("neuron selection needs an mlp model")
        if sel.strategy not in ("uniform", "all"):
            raise ConfigConflict(f"neuron selection cannot use strategy {sel.strategy}")
    elif sel.plan == "mixed":
        if model.kind != "sparse_mlp":
            raise ConfigConflict("mixed selection needs the sparse_mlp model")
        if sel.strategy != "mixed":
            raise ConfigConflict(f"mixed selection cannot use strategy {sel.strategy}")
    elif sel.strategy != "all":
        raise ConfigConflict(f"plan {sel.plan} cannot use strategy {sel.strategy}")
    if sel.shared_per_round and sel.plan not in ("neuron", "mixed"):
        raise ConfigConflict("shared_per_round applies to random (neuron or mixed) keys only")
    if not 0 < sel.alpha <= 1:
        raise ConfigConflict("selection.alpha must lie in (0, 1]")
    if sel.m is not None and sel.m < 1:
        raise ConfigConflict("selection.m must be positive")
    if sel.m is not None and sel.plan == "neuron" and sel.m > model.hidden:
        raise ConfigConflict(f"selection.m={sel.m} exceeds the {model.hidden} hidden units")

    tr = cfg.training
    if tr.rounds < 1:
        raise ConfigConflict("training.rounds must be at least 1")
    for name in ("cohort_size", "epochs", "batch_size", "eval_every", "trials"):
        if getattr(tr, name) < 1:
            raise ConfigConflict(f"training.{name} must be at least 1")
    if tr.client_lr < 0 or tr.server_lr < 0:
        raise ConfigConflict("learning rates must be non-negative")
    if tr.optimizer != "sgd" and tr.tau <= 0:
        raise ConfigConflict("training.tau must be positive for adaptive optimizers")
    if model.hidden < 1 or model.embed < 1:
        raise ConfigConflict("model dimensions must be positive")
    return cfg


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise BadConfig("config must be a JSON object")
    known = {"task", "model", "selection", "training", "delivery", "output_dir"}
    for key in raw:
        if key not in known:
            raise UnknownKey(key)
    if "task" not in raw or "model" not in raw:
        raise BadConfig("config needs both task and model")
    model_raw = raw["model"]
    if isinstance(model_raw, str):
        model_raw = {"kind": model_raw}
    cfg = ExperimentConfig(
        task=_task(raw["task"]),
        model=_section(ModelConfig, model_raw, "model"),
        selection=_section(SelectionConfig, raw.get("selection"), "selection"),
        training=_section(TrainingConfig, raw.get("training"), "training"),
        delivery=_section(DeliveryConfig, raw.get("delivery"), "delivery"),
        output_dir=_coerce(raw.get("output_dir", "out"), str, "output_dir"),
    )
    return validate(cfg)


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON config document into a validated :class:`ExperimentConfig`."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise BadConfig(f"config is not valid JSON: {err}") from None
    return config_from_dict(raw)
