"""Experiment configuration: defaults, method switches, JSON files and flag overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..textdata import TASK_NAMES

METHODS = ("ppsebm", "only_ebm", "only_pps", "neither", "finetune", "multitask")
DEFAULT_ORDER = (TASK_NAMES["classify"], TASK_NAMES["tag"], TASK_NAMES["slots"])
GRID = (0.0, 0.01, 0.03, 0.05, 0.07, 0.1, 0.15, 0.2)


class ConfigError(ValueError):
    """An experiment configuration is invalid."""


@dataclass
class ExperimentConfig:
    method: str = "ppsebm"
    task_order: tuple[str, ...] = DEFAULT_ORDER
    gamma: float = 0.05
    lambda_p: float = 0.05
    train_qa: bool = True         # False: only the prompt slot learns (L_QA switched off)
    k: int = 1
    p_len: int = 10
    # EBM
    d: int = 16
    k0: int = 20
    k1: int = 20
    s0: float = 0.1
    s1: float = 0.1
    eta0: float = 1e-4
    eta1: float = 0.3
    b: int = 16
    T: int = 500
    clip_norm: float | None = 10.0
    ebm_replay: float = 1.0       # EBM self-replay per earlier task, as a fraction of |train|
    psi_steps: int = 20
    # learner
    epochs: int = 20
    patience: int = 3
    lr: float = 1e-2
    slot_lr: float = 1e-2
    batch_size: int = 32
    pretrain_steps: int = 150
    embed_dim: int = 32
    hidden: int = 64
    # data
    n_train: int = 512
    n_test: int = 128
    data_seed: int = 0
    seed: int = 42
    out: str | None = None
    checkpoints: bool = True

    def __post_init__(self):
        self.task_order = tuple(self.task_order)

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.task_order:
            raise ConfigError("task_order is empty")
        known = set(TASK_NAMES.values())
        missing = [t for t in self.task_order if t not in known]
        if missing:
            raise ConfigError(f"unknown task(s) {missing}; known: {sorted(known)}")
        if len(set(self.task_order)) != len(self.task_order):
            raise ConfigError(f"task_order repeats a task: {list(self.task_order)}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.lambda_p < 0:
            raise ConfigError(f"lambda_p must be nonnegative, got {self.lambda_p}")
        for name in ("k", "p_len", "d", "b", "epochs", "batch_size", "n_train", "n_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("k0", "k1", "T", "patience", "pretrain_steps", "psi_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        for name in ("s0", "s1", "eta0", "eta1", "ebm_replay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.lr <= 0 or self.slot_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.seed < 2 ** 64 or not 0 <= self.data_seed < 2 ** 63:
            raise ConfigError("seeds must be nonnegative 64-bit integers")
        return self

    # Effective switches -------------------------------------------------

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.method in ("only_pps", "neither", "finetune", "multitask") else self.gamma

    @property
    def effective_lambda_p(self) -> float:
        return 0.0 if self.method in ("only_ebm", "neither", "finetune", "multitask") else self.lambda_p

    @property
    def uses_prompts(self) -> bool:
        return self.method not in ("finetune", "multitask")

    def ebm_key(self) -> str:
        """Fields the trained EBM depends on (besides the task prefix)."""
        keys = ("d", "k0", "k1", "s0", "s1", "eta0", "eta1", "b", "T", "clip_norm",
                "ebm_replay", "psi_steps", "embed_dim", "hidden", "n_train", "n_test",
                "data_seed", "seed", "k")
        return json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["task_order"] = list(self.task_order)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ConfigError(f"unknown config field(s): {unknown}")
        return cls(**obj)


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def coerce(name: str, raw):
    """Parse a flag or JSON value into the field's type."""
    kind = FIELD_TYPES[name]
    try:
        if name == "task_order":
            if isinstance(raw, str):
                return tuple(t.strip() for t in raw.split(",") if t.strip())
            return tuple(raw)
        if raw is None:
            return None
        if kind == "bool":
            if isinstance(raw, str):
                word = raw.lower()
                if word not in ("1", "true", "yes", "on", "0", "false", "no", "off"):
                    raise ValueError(raw)
                return word in ("1", "true", "yes", "on")
            return bool(raw)
        if kind == "int":
            return int(raw)
        if kind.startswith("float"):
            if isinstance(raw, str) and raw.lower() == "none":
                return None
            return float(raw)
        return raw
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the JSON file, then explicit overrides."""
    values: dict = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(obj, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        values.update(obj)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    unknown = sorted(set(values) - set(FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config field(s): {unknown}")
    return ExperimentConfig(**{k: coerce(k, v) for k, v in values.items()}).validate()
