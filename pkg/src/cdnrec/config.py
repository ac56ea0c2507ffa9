"""Experiment configuration files (YAML).

One file describes one experiment.  Every section is optional and falls back
to defaults; unknown keys anywhere are rejected, and all values are
validated before any data is read.  Schema::

    dataset:
      source: zipf            # zipf | movielens | bookcrossing
      path: data/ml-1m        # raw directory (movielens, bookcrossing)
      cache_dir: cache/zipf   # prepared cache (written by `prepare`)
      head_fraction: 0.2
      split: [0.8, 0.1, 0.1]  # train/valid/test, chronological per user
      seed: 0                 # regularizer subsampling
      zipf: {n_users: 2000, n_items: 1000, exponent: 1.2, n_events: 100000, n_genres: 20, seed: 0}
    method: {name: cdn, gamma: 4.0, beta: 0.999, stage2_epochs: null,
             expert_design: mem_gen, fixed_alpha: 0.5, logq_at_inference: false}
    model:
      item: {n_mem_experts: 1, n_gen_experts: 1, expert_hidden_dims: [64], embedding_dim: 32,
             output_dim: 32, freq_buckets: 16}
      user: {shared_dims: [64, 64], branch_dims: [64], embedding_dim: 32, output_dim: 32}
    train: {batch_size: 512, epochs: 10, optimizer: adam, lr: 0.001, seed: 0, eval_every: 1, eval_k: 50}
    eval: {ks: [50], trials: 1}
    run_dir: runs/cdn
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from cdnrec.baselines import MethodConfig
from cdnrec.errors import ConfigError
from cdnrec.model import ItemTowerConfig, UserTowerConfig
from cdnrec.training import TrainConfig

SOURCES = ("zipf", "movielens", "bookcrossing")


@dataclass(frozen=True)
class ZipfConfig:
    n_users: int = 2000
    n_items: int = 1000
    exponent: float = 1.2
    n_events: int = 100_000
    n_genres: int = 20
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.n_events, self.n_genres) < 1:
            raise ConfigError("zipf sizes must be positive")
        if self.exponent < 0:
            raise ConfigError("zipf exponent must be non-negative")


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "zipf"
    path: Optional[str] = None
    cache_dir: Optional[str] = None
    head_fraction: float = 0.2
    split: tuple[float, ...] = (0.8, 0.1, 0.1)
    seed: int = 0
    zipf: ZipfConfig = ZipfConfig()

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"dataset.source must be one of {', '.join(SOURCES)}, got {self.source!r}")
        if self.source != "zipf" and not self.path:
            raise ConfigError(f"dataset.path is required for source {self.source!r}")
        if not 0.0 < self.head_fraction < 1.0:
            raise ConfigError(f"dataset.head_fraction must lie in (0, 1), got {self.head_fraction}")
        if len(self.split) != 3 or min(self.split) < 0 or not math.isclose(sum(self.split), 1.0):
            raise ConfigError(f"dataset.split needs three non-negative ratios summing to 1, got {list(self.split)}")


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = (50,)
    trials: int = 1

    def __post_init__(self):
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("eval.ks needs at least one positive K")
        if self.trials < 1:
            raise ConfigError("eval.trials must be at least 1")


@dataclass(frozen=True)
class ModelConfig:
    item: ItemTowerConfig = ItemTowerConfig()
    user: UserTowerConfig = UserTowerConfig()


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = DatasetConfig()
    method: MethodConfig = MethodConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    run_dir: str = "runs/experiment"

    def with_method(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, method=dataclasses.replace(self.method, **changes))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, data: Any, where: str):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(map(str, unknown))}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        path = f"{where}.{name}" if where else name
        default = f.default if f.default is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path} must be a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data: Optional[Mapping]) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {}, "")
    _check_types(cfg)
    return cfg


def _check_types(cfg: ExperimentConfig) -> None:
    checks = [
        ("train.batch_size", cfg.train.batch_size, int),
        ("train.epochs", cfg.train.epochs, int),
        ("train.seed", cfg.train.seed, int),
        ("train.lr", cfg.train.lr, (int, float)),
        ("method.gamma", cfg.method.gamma, (int, float)),
        ("dataset.head_fraction", cfg.dataset.head_fraction, (int, float)),
        ("eval.trials", cfg.eval.trials, int),
    ]
    for name, value, kind in checks:
        if isinstance(value, bool) or not isinstance(value, kind):
            raise ConfigError(f"{name} has the wrong type: {value!r}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path} is not valid YAML: {exc}") from None
    return config_from_dict(data)
