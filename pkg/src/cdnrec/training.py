"""Epoch loop over paired main/regularizer streams, checkpoints and run history.

All randomness is derived from ``(seed, epoch)``, so a run resumed from the
checkpoint written after epoch ``k`` replays epochs ``k+1..T`` exactly.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from cdnrec.baselines import MethodConfig, Stage, build_model, schedule_for, training_stages
from cdnrec.datasets import CatalogStats, InteractionLog, SplitLog
from cdnrec.errors import ConfigError, NonFiniteError, TrainingDiverged
from cdnrec.evaluation import OVERALL, evaluate
from cdnrec.model import Batch, ItemTowerConfig, RetrievalModel, UserTowerConfig, alpha
from cdnrec.numerics import ParamStore, Tape, load_checkpoint, make_optimizer, save_checkpoint

log = logging.getLogger(__name__)

PARAM_PREFIX = "param/"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    epochs: int = 10
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 1  # 0 disables validation
    eval_k: int = 50

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (in-batch softmax needs a negative)")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be non-negative")


@dataclass
class PreparedData:
    split: SplitLog
    stats: CatalogStats


@dataclass
class EpochRecord:
    epoch: int
    alpha: float
    loss: float
    steps: int
    stage: int
    valid: Optional[dict] = None
    wall_time: float = 0.0

    def comparable(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class RunHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def alphas(self) -> list[float]:
        return [r.alpha for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "RunHistory":
        lines = Path(path).read_text().splitlines()
        return cls([EpochRecord(**json.loads(l)) for l in lines if l.strip()])


@dataclass
class FitResult:
    model: RetrievalModel
    store: ParamStore
    history: RunHistory
    best_epoch: Optional[int] = None
    checkpoint_errors: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.checkpoint_errors


def epoch_batches(n_main: int, n_reg: int, batch_size: int, seed: int, epoch: int):
    """Yield ``(main_rows, reg_rows)`` index pairs for one epoch.

    The main log is shuffled and walked once (last batch may be short); the
    regularizer log is shuffled independently and cycled to match.
    """
    perm_m = np.random.default_rng([seed, epoch, 0]).permutation(n_main)
    perm_r = np.random.default_rng([seed, epoch, 1]).permutation(n_reg) if n_reg else None
    for s in range(math.ceil(n_main / batch_size)):
        rows_m = perm_m[s * batch_size : (s + 1) * batch_size]
        rows_r = None
        if perm_r is not None:
            rows_r = perm_r[(s * batch_size + np.arange(rows_m.size)) % n_reg]
        yield rows_m, rows_r


def _param_norms(store: ParamStore) -> dict[str, float]:
    return {k: float(np.linalg.norm(v)) for k, v in store.params.items()}


def run_epoch(
    model: RetrievalModel,
    store: ParamStore,
    optimizer,
    main: InteractionLog,
    regularizer: Optional[InteractionLog],
    *,
    alpha_t: float,
    batch_size: int,
    seed: int,
    epoch: int,
) -> tuple[float, int]:
    """One pass over ``main``; returns (mean batch loss, steps)."""
    if model.bilateral and (regularizer is None or len(regularizer) == 0):
        raise ValueError("bilateral model needs a non-empty regularizer log")
    n_reg = len(regularizer) if model.bilateral else 0
    total, steps = 0.0, 0
    for rows_m, rows_r in epoch_batches(len(main), n_reg, batch_size, seed, epoch):
        if rows_m.size < 2:
            continue
        batch = Batch(
            main.users[rows_m],
            main.items[rows_m],
            None if rows_r is None else regularizer.users[rows_r],
            None if rows_r is None else regularizer.items[rows_r],
        )
        tape = Tape(store)
        try:
            loss = model.loss(tape, batch, alpha_t)
            value = float(loss.value)
        except NonFiniteError:
            value = math.nan
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch}, step {steps}",
                {
                    "epoch": epoch,
                    "step": steps,
                    "alpha": alpha_t,
                    "users_m": batch.users_m.tolist(),
                    "items_m": batch.items_m.tolist(),
                    "param_norms": _param_norms(store),
                },
            )
        tape.backward(loss)
        optimizer.step(store)
        total += value
        steps += 1
    return (total / steps if steps else 0.0), steps


def _stage_of(stages: list[Stage], epoch: int) -> tuple[int, Stage]:
    start = 0
    for k, st in enumerate(stages):
        if epoch < start + st.epochs:
            return k, st
        start += st.epochs
    raise IndexError(epoch)


def checkpoint_meta(method: MethodConfig, config: TrainConfig, item_config, user_config, epoch: int, optimizer) -> dict:
    return {
        "epoch": epoch,
        "method": asdict(method),
        "train": asdict(config),
        "item_config": asdict(item_config),
        "user_config": asdict(user_config),
        "optimizer": optimizer.state_meta(),
    }


def write_checkpoint(path, store: ParamStore, optimizer, meta: dict) -> Path:
    arrays = {PARAM_PREFIX + k: v for k, v in store.params.items()}
    arrays.update(optimizer.state_arrays())
    return save_checkpoint(path, arrays, meta)


def _configs_from_meta(meta: dict):
    item = meta["item_config"]
    user = meta["user_config"]
    return (
        MethodConfig(**meta["method"]),
        TrainConfig(**meta["train"]),
        ItemTowerConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in item.items()}),
        UserTowerConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in user.items()}),
    )


def load_trained(path, data: PreparedData) -> tuple[RetrievalModel, ParamStore, dict]:
    """Rebuild the model described by a checkpoint and load its parameters."""
    arrays, meta = load_checkpoint(path)
    method, _, item_cfg, user_cfg = _configs_from_meta(meta)
    model = build_model(method, data.split.train, data.stats, item_cfg, user_cfg)
    store = ParamStore()
    for k in sorted(arrays):
        if k.startswith(PARAM_PREFIX):
            store.add(k[len(PARAM_PREFIX) :], arrays[k])
    return model, store, meta


def fit(
    method: MethodConfig,
    config: TrainConfig,
    data: PreparedData,
    *,
    item_config: ItemTowerConfig = ItemTowerConfig(),
    user_config: UserTowerConfig = UserTowerConfig(),
    run_dir=None,
    resume: bool = False,
    stop_after: Optional[int] = None,
) -> FitResult:
    """Train ``method`` for ``config.epochs`` epochs.

    With ``run_dir`` set, writes ``last.ckpt`` after every epoch (used by
    ``resume``), ``best.ckpt`` at the best validation Overall HR@K,
    ``final.ckpt`` when done, and ``history.jsonl``.  ``stop_after`` ends the
    run early after that many completed epochs, as an interruption would.
    """
    split, stats = data.split, data.stats
    model = build_model(method, split.train, stats, item_config, user_config)
    schedule = schedule_for(method, config.epochs)
    stages = training_stages(method, config.epochs)
    store = model.init_params(config.seed)
    optimizer = make_optimizer(config.optimizer, config.lr)
    history = RunHistory()
    start = 0
    best_hr, best_epoch = -1.0, None
    run_dir = Path(run_dir) if run_dir is not None else None

    if run_dir is not None and resume and (run_dir / "last.ckpt").exists():
        arrays, meta = load_checkpoint(run_dir / "last.ckpt")
        for k in store.names():
            store.params[k][...] = arrays[PARAM_PREFIX + k]
        optimizer.load_state(arrays, meta["optimizer"])
        start = int(meta["epoch"])
        best_hr = meta.get("best_hr", -1.0)
        best_epoch = meta.get("best_epoch")
        if (run_dir / "history.jsonl").exists():
            history = RunHistory(RunHistory.read(run_dir / "history.jsonl").records[:start])
        log.info("resumed %s from epoch %d", run_dir, start)

    errors: list[str] = []

    def persist(write, *args) -> None:
        # after the first failure no further files are attempted
        if errors:
            return
        try:
            write(*args)
        except OSError as exc:
            errors.append(f"{exc.filename or run_dir}: {exc.strerror or exc}")
            log.error("checkpoint write failed: %s", errors[-1])

    main_logs = {"train": split.train, "regularizer": split.regularizer}
    for epoch in range(start, config.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        t0 = time.perf_counter()
        stage_idx, stage = _stage_of(stages, epoch)
        store.freeze(stage.frozen_prefixes)
        a = alpha(epoch, schedule)
        try:
            loss, steps = run_epoch(
                model,
                store,
                optimizer,
                main_logs[stage.main_stream],
                split.regularizer,
                alpha_t=a,
                batch_size=config.batch_size,
                seed=config.seed,
                epoch=epoch,
            )
        except TrainingDiverged as exc:
            if run_dir is not None:
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "diagnostic.json").write_text(json.dumps(exc.diagnostic, indent=2))
            raise
        valid = None
        done = epoch + 1
        if config.eval_every and (done % config.eval_every == 0 or done == config.epochs) and len(split.valid):
            rep = evaluate(model, store, split.valid, stats, (config.eval_k,), exclude=(split.train,))[config.eval_k]
            valid = rep.to_dict()["slices"]
            hr = rep.metric(OVERALL)
            if hr is not None and hr > best_hr:
                best_hr, best_epoch = hr, done
                if run_dir is not None:
                    meta = checkpoint_meta(method, config, item_config, user_config, done, optimizer)
                    persist(write_checkpoint, run_dir / "best.ckpt", store, optimizer, meta)
        history.records.append(EpochRecord(epoch, a, loss, steps, stage_idx, valid, time.perf_counter() - t0))
        log.info("epoch %d alpha=%.4f loss=%.5f", epoch, a, loss)
        if run_dir is not None:
            meta = checkpoint_meta(method, config, item_config, user_config, done, optimizer)
            meta.update(best_hr=best_hr, best_epoch=best_epoch)
            persist(write_checkpoint, run_dir / "last.ckpt", store, optimizer, meta)
            persist(history.write, run_dir / "history.jsonl")

    store.freeze(())
    if run_dir is not None and len(history) == config.epochs:
        meta = checkpoint_meta(method, config, item_config, user_config, config.epochs, optimizer)
        persist(write_checkpoint, run_dir / "final.ckpt", store, optimizer, meta)
    return FitResult(model, store, history, best_epoch, errors)
