"""Run configuration: strict JSON schema, dataclasses, and builders.

Unknown keys are rejected with field-level messages because silent typos in
hyperparameters are the main reproducibility hazard.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
import json

from .errors import ConfigError
from .model import ModelConfig
from .tasks import CharTokenizer, DEFAULT_ALPHABET, TaskSpec

SCHEMA_VERSION = 1

_REQUIRED = object()


def _take(section: str, data: dict, fields: dict[str, tuple]) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {sorted(unknown)}")
    out = {}
    for key, (types, default) in fields.items():
        if key in data:
            value = data[key]
            if not isinstance(value, types) or (bool not in _as_tuple(types)
                                                and isinstance(value, bool)):
                raise ConfigError(f"{section}.{key}: expected {_type_names(types)}, "
                                  f"got {type(value).__name__}")
            out[key] = value
        elif default is _REQUIRED:
            raise ConfigError(f"{section}.{key}: missing required key")
        else:
            out[key] = default
    return out


def _as_tuple(types):
    return types if isinstance(types, tuple) else (types,)


def _type_names(types):
    return "/".join(t.__name__ for t in _as_tuple(types))


@dataclass
class TrainConfig:
    total_steps: int = 2000
    warmup_steps: int = 100
    peak_lr: float = 3e-4
    lambda_weight: float = 0.1
    batch_size: int = 32
    eval_every: int = 500
    temperature: float = 1.0
    weight_decay: float = 0.01
    grad_clip: float | None = None
    no_prototype: bool = False
    no_retriever: bool = False
    stop_grad_h: bool = False
    literal_eq8: bool = False
    literal_negatives_only: bool = False
    few_shot_trainable: str = "embedding"
    adapt_steps: int = 100
    adapt_lr: float = 0.05

    def validate(self) -> None:
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ConfigError(
                f"train.warmup_steps: {self.warmup_steps} must be below "
                f"total_steps {self.total_steps}")
        if self.lambda_weight < 0:
            raise ConfigError("train.lambda: must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size: must be at least 2")
        if self.temperature <= 0:
            raise ConfigError("train.temperature: must be positive")
        if self.eval_every < 1:
            raise ConfigError("train.eval_every: must be positive")
        if self.few_shot_trainable not in ("embedding", "embedding+hypernet",
                                           "embedding+hypernet+adapters"):
            raise ConfigError(f"train.few_shot_trainable: unknown selector "
                              f"{self.few_shot_trainable!r}")


@dataclass
class PretrainConfig:
    steps: int = 2500
    warmup_steps: int = 100
    peak_lr: float = 1e-3
    batch_size: int = 32
    noise_rate: float = 0.1
    min_len: int = 3
    max_len: int = 10
    target_accuracy: float = 0.95
    eval_every: int = 100
    eval_n: int = 96

    def validate(self) -> None:
        if not (0 <= self.warmup_steps < self.steps):
            raise ConfigError("pretrain.warmup_steps: must be below pretrain.steps")
        if not (0 <= self.noise_rate < 1):
            raise ConfigError("pretrain.noise_rate: must be in [0, 1)")


@dataclass
class ModelSection:
    d: int = 64
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    bottleneck: int = 8
    max_len: int = 32
    dropout: float = 0.0
    retrieval_dim: int = 16
    hyper_dim: int = 8


@dataclass
class TaskEntry:
    name: str
    family: str
    alphabet: str
    min_len: int
    max_len: int
    seed: int
    shift: int | None = None
    weights: list | None = None
    n_train: int = 512
    n_eval: int = 64

    def spec(self) -> TaskSpec:
        return TaskSpec(name=self.name, family=self.family, alphabet=self.alphabet,
                        min_len=self.min_len, max_len=self.max_len, seed=self.seed,
                        shift=self.shift,
                        weights=None if self.weights is None else tuple(self.weights))


@dataclass
class RunConfig:
    seed: int
    model: ModelSection
    train: TrainConfig
    pretrain: PretrainConfig
    tasks: list[TaskEntry]
    heldout_tasks: list[TaskEntry] = field(default_factory=list)
    backbone_checkpoint: str | None = None
    out_dir: str | None = None

    def validate(self) -> None:
        self.train.validate()
        self.pretrain.validate()
        if len(self.tasks) < 2:
            raise ConfigError("tasks: need at least two training tasks")
        names = [t.name for t in self.tasks] + [t.name for t in self.heldout_tasks]
        if len(set(names)) != len(names):
            raise ConfigError("tasks: duplicate task names")
        for entry in self.tasks + self.heldout_tasks:
            entry.spec()  # surfaces family/alphabet errors with the task name
        self.model_config()  # surfaces dimension errors

    def model_config(self) -> ModelConfig:
        tok = CharTokenizer(DEFAULT_ALPHABET)
        m = self.model
        return ModelConfig(d=m.d, n_heads=m.n_heads, d_ff=m.d_ff,
                           enc_layers=m.enc_layers, dec_layers=m.dec_layers,
                           bottleneck=m.bottleneck, vocab_size=tok.vocab_size,
                           max_len=m.max_len, dropout=m.dropout,
                           literal_blocks=self.train.literal_eq8)

    def task_names(self) -> list[str]:
        return [t.name for t in self.tasks]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["schema_version"] = SCHEMA_VERSION
        out["train"] = dict(out["train"])
        out["train"]["lambda"] = out["train"].pop("lambda_weight")
        return out


_TRAIN_FIELDS = {
    "total_steps": (int, 2000), "warmup_steps": (int, 100), "peak_lr": ((int, float), 3e-4),
    "lambda": ((int, float), 0.1), "batch_size": (int, 32), "eval_every": (int, 500),
    "temperature": ((int, float), 1.0), "weight_decay": ((int, float), 0.01),
    "grad_clip": ((int, float, type(None)), None),
    "no_prototype": (bool, False), "no_retriever": (bool, False),
    "stop_grad_h": (bool, False), "literal_eq8": (bool, False),
    "literal_negatives_only": (bool, False),
    "few_shot_trainable": (str, "embedding"),
    "adapt_steps": (int, 100), "adapt_lr": ((int, float), 0.05),
}

_PRETRAIN_FIELDS = {
    "steps": (int, 2500), "warmup_steps": (int, 100), "peak_lr": ((int, float), 1e-3),
    "batch_size": (int, 32), "noise_rate": ((int, float), 0.1),
    "min_len": (int, 3), "max_len": (int, 10),
    "target_accuracy": ((int, float), 0.95), "eval_every": (int, 100), "eval_n": (int, 96),
}

_MODEL_FIELDS = {
    "d": (int, 64), "n_heads": (int, 4), "d_ff": (int, 128),
    "enc_layers": (int, 2), "dec_layers": (int, 2), "bottleneck": (int, 8),
    "max_len": (int, 32), "dropout": ((int, float), 0.0),
    "retrieval_dim": (int, 16), "hyper_dim": (int, 8),
}

_TASK_FIELDS = {
    "name": (str, _REQUIRED), "family": (str, _REQUIRED), "alphabet": (str, _REQUIRED),
    "min_len": (int, _REQUIRED), "max_len": (int, _REQUIRED), "seed": (int, _REQUIRED),
    "shift": ((int, type(None)), None), "weights": ((list, type(None)), None),
    "n_train": (int, 512), "n_eval": (int, 64),
}

_TOP_FIELDS = {
    "schema_version": (int, _REQUIRED), "seed": (int, 0),
    "model": (dict, None), "train": (dict, None), "pretrain": (dict, None),
    "tasks": (list, _REQUIRED), "heldout_tasks": (list, None),
    "backbone_checkpoint": ((str, type(None)), None),
    "out_dir": ((str, type(None)), None),
}


def _parse_task(section: str, data: dict) -> TaskEntry:
    kw = _take(section, data, _TASK_FIELDS)
    if kw["weights"] is not None:
        if not all(isinstance(w, (int, float)) and not isinstance(w, bool)
                   for w in kw["weights"]):
            raise ConfigError(f"{section}.weights: entries must be numbers")
        kw["weights"] = [float(w) for w in kw["weights"]]
    return TaskEntry(**kw)


def parse_run_config(data: dict) -> RunConfig:
    top = _take("config", data, _TOP_FIELDS)
    if top["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, "
                          f"got {top['schema_version']}")
    train_kw = _take("train", top["train"] or {}, _TRAIN_FIELDS)
    train_kw["lambda_weight"] = float(train_kw.pop("lambda"))
    cfg = RunConfig(
        seed=top["seed"],
        model=ModelSection(**_take("model", top["model"] or {}, _MODEL_FIELDS)),
        train=TrainConfig(**train_kw),
        pretrain=PretrainConfig(**_take("pretrain", top["pretrain"] or {}, _PRETRAIN_FIELDS)),
        tasks=[_parse_task(f"tasks[{i}]", t) for i, t in enumerate(top["tasks"])],
        heldout_tasks=[_parse_task(f"heldout_tasks[{i}]", t)
                       for i, t in enumerate(top["heldout_tasks"] or [])],
        backbone_checkpoint=top["backbone_checkpoint"],
        out_dir=top["out_dir"],
    )
    cfg.validate()
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}")
    return parse_run_config(data)
