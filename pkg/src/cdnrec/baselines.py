"""Re-balancing and decoupling baselines plus the ablation variants.

Every method is a :class:`RetrievalModel` built from the same towers; what
changes is the user side (single or bilateral), the item design, the blend
schedule and optional loss adjustments.  NDP additionally trains in two
stages (see :func:`training_stages`).

=================  ==========  ====================  ==============
method             user side   item design           schedule
=================  ==========  ====================  ==============
two_tower          single      plain                 -
class_balance      single      plain                 -  (row weights)
logq               single      plain                 -  (logit shift)
ndp                single      plain                 -  (2 stages)
bbn                bilateral   plain                 1 - (t/T)^2
cdn                bilateral   mem_gen               1 - (t/(gT))^2
bdn                bilateral   mem_gen               0.5
udn                bilateral   plain                 1 - (t/(gT))^2
idn                single      mem_gen               -
expert_design      bilateral   <expert_design>       1 - (t/(gT))^2
=================  ==========  ====================  ==============
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from cdnrec.datasets import CatalogStats, InteractionLog
from cdnrec.errors import ConfigError
from cdnrec.model import (
    AdapterSchedule,
    Batch,
    ItemTower,
    ItemTowerConfig,
    RetrievalModel,
    UserTower,
    UserTowerConfig,
)
from cdnrec.numerics import Node, Tape

METHODS = (
    "two_tower",
    "class_balance",
    "logq",
    "ndp",
    "bbn",
    "cdn",
    "bdn",
    "udn",
    "idn",
    "expert_design",
)
EXPERT_DESIGNS = {"mem_gen": "mem_gen", "unbalanced_balanced": "unbalanced_balanced", "head_tail": "head_tail"}

_ARCH = {
    "two_tower": (False, "plain"),
    "class_balance": (False, "plain"),
    "logq": (False, "plain"),
    "ndp": (False, "plain"),
    "bbn": (True, "plain"),
    "cdn": (True, "mem_gen"),
    "bdn": (True, "mem_gen"),
    "udn": (True, "plain"),
    "idn": (False, "mem_gen"),
}

USER_PREFIX = "user/"


@dataclass(frozen=True)
class MethodConfig:
    name: str = "cdn"
    gamma: float = 4.0
    beta: float = 0.999
    stage2_epochs: Optional[int] = None
    expert_design: str = "mem_gen"
    fixed_alpha: float = 0.5
    logq_at_inference: bool = False

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigError(f"unknown method {self.name!r}; choose from {', '.join(METHODS)}")
        if self.expert_design not in EXPERT_DESIGNS:
            raise ConfigError(f"unknown expert design {self.expert_design!r}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"class-balance beta must lie in [0, 1), got {self.beta}")
        if self.stage2_epochs is not None and self.stage2_epochs < 0:
            raise ConfigError("stage2_epochs must be non-negative")
        if not self.gamma > 1:
            raise ConfigError(f"gamma must exceed 1, got {self.gamma}")
        if not 0.0 <= self.fixed_alpha <= 1.0:
            raise ConfigError(f"fixed_alpha must lie in [0, 1], got {self.fixed_alpha}")

    @property
    def bilateral(self) -> bool:
        return architecture(self)[0]

    @property
    def item_design(self) -> str:
        return architecture(self)[1]


def architecture(method: MethodConfig) -> tuple[bool, str]:
    """(bilateral user side?, item tower design)."""
    if method.name == "expert_design":
        return True, EXPERT_DESIGNS[method.expert_design]
    return _ARCH[method.name]


def schedule_for(method: MethodConfig, total_epochs: int) -> AdapterSchedule:
    if method.name in ("cdn", "udn", "expert_design"):
        return AdapterSchedule("cdn", total_epochs, gamma=method.gamma)
    if method.name == "bbn":
        return AdapterSchedule("bbn", total_epochs)
    if method.name == "bdn":
        return AdapterSchedule("fixed", total_epochs, alpha0=method.fixed_alpha)
    return AdapterSchedule("fixed", total_epochs, alpha0=1.0)


# ---------------------------------------------------------------------------
# re-balancing adjustments


def class_balance_weights(freqs, beta: float) -> np.ndarray:
    """Raw effective-number weights ``(1 - beta) / (1 - beta**n)``.

    Counts below 1 are treated as 1 (such items never appear in a batch).
    """
    if not 0.0 <= beta < 1.0:
        raise ConfigError(f"beta must lie in [0, 1), got {beta}")
    n = np.maximum(np.asarray(freqs, dtype=np.float64), 1.0)
    if beta == 0.0:
        return np.ones_like(n)
    return (1.0 - beta) / -np.expm1(n * np.log(beta))


def normalize_batch_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    return w / w.mean()


def sampling_log_probs(freqs) -> np.ndarray:
    """``log q`` with ``q_j = freq_j / sum(freq)``.

    Unseen items count as seen once, which keeps an inference-time correction
    finite for them.
    """
    f = np.asarray(freqs, dtype=np.float64)
    return np.log(np.maximum(f, 1.0)) - np.log(f.sum())


def logq_correct(logits, candidate_probs) -> np.ndarray:
    """Subtract ``log q_c`` from every logit in column ``c``."""
    q = np.asarray(candidate_probs, dtype=np.float64)
    if np.any(q <= 0):
        raise ValueError("logQ correction needs positive candidate probabilities")
    return np.asarray(logits, dtype=np.float64) - np.log(q)[None, :]


# ---------------------------------------------------------------------------
# model builders


def build_model(
    method: MethodConfig,
    train: InteractionLog,
    stats: CatalogStats,
    item_config: ItemTowerConfig = ItemTowerConfig(),
    user_config: UserTowerConfig = UserTowerConfig(),
) -> RetrievalModel:
    bilateral, design = architecture(method)
    items = ItemTower(item_config, train.n_items, train.item_features, stats.freq, design, stats.is_head)
    users = UserTower(user_config, train.n_users, bilateral)
    log_q = weights = None
    if method.name == "logq":
        log_q = sampling_log_probs(stats.freq)
    elif method.name == "class_balance":
        weights = class_balance_weights(stats.freq, method.beta)
    return RetrievalModel(
        users,
        items,
        item_log_q=log_q,
        item_weights=weights,
        logq_at_inference=method.logq_at_inference,
    )


def two_tower_loss(tape: Tape, model: RetrievalModel, batch: Batch) -> Node:
    """In-batch softmax over main-branch user/item dot products."""
    x = model.user_tower.forward(tape, batch.users_m)
    y = model.item_tower.forward(tape, batch.items_m, branch=0)
    return tape.softmax_xent(tape.matmul_t(x, y))


# ---------------------------------------------------------------------------
# training stages


@dataclass(frozen=True)
class Stage:
    """A run of epochs sharing one main stream and one set of frozen slots."""

    epochs: int
    main_stream: str = "train"  # or "regularizer"
    frozen_prefixes: tuple[str, ...] = ()


def training_stages(method: MethodConfig, total_epochs: int) -> list[Stage]:
    """NDP: representation stage on the long-tail log, then the item tower
    ("classifier") retrained on the rebalanced log with the user tower frozen.
    Default split is half the epoch budget each."""
    if method.name != "ndp":
        return [Stage(total_epochs)]
    stage2 = total_epochs // 2 if method.stage2_epochs is None else method.stage2_epochs
    if stage2 > total_epochs:
        raise ConfigError(f"stage2_epochs={stage2} exceeds the {total_epochs}-epoch budget")
    stages = [Stage(total_epochs - stage2)]
    if stage2:
        stages.append(Stage(stage2, "regularizer", (USER_PREFIX,)))
    return [s for s in stages if s.epochs > 0]


def train_ndp(method: MethodConfig, train_config, data, **kwargs):
    """Two-stage decoupled training; thin wrapper over :func:`cdnrec.training.fit`."""
    from cdnrec.training import fit

    if method.name != "ndp":
        method = MethodConfig(name="ndp", stage2_epochs=method.stage2_epochs)
    return fit(method, train_config, data, **kwargs)
