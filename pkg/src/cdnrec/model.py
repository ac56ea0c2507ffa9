"""Cross-decoupled two-tower retrieval model.

Item side: experts over memorization features (item id) and generalization
features (genres, authors, ...) mixed by a softmax gate over the item's
log-frequency bucket.  User side: a shared network ``f`` followed by a main
head ``h_m`` and, for bilateral models, a regularizer head ``h_r``.  During
training the two branches' logits are blended by ``alpha_t``; serving only
ever touches the main branch.

Parameter slots are prefixed ``item/`` or ``user/``; the regularizer head
lives under ``user/h_r/``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from cdnrec.datasets import ItemFeature
from cdnrec.errors import ConfigError, ShapeError
from cdnrec.numerics import Node, ParamStore, Tape

ITEM_DESIGNS = ("plain", "mem_gen", "unbalanced_balanced", "head_tail")
MAIN, REGULARIZER = "main", "regularizer"
REGULARIZER_PREFIX = "user/h_r/"


@dataclass(frozen=True)
class ItemTowerConfig:
    n_mem_experts: int = 1
    n_gen_experts: int = 1
    expert_hidden_dims: tuple[int, ...] = (64,)
    embedding_dim: int = 32
    output_dim: int = 32
    freq_buckets: int = 16

    def __post_init__(self):
        if self.n_mem_experts < 1 or self.n_gen_experts < 1:
            raise ConfigError("item tower needs at least one memorization and one generalization expert")
        dims = (*self.expert_hidden_dims, self.embedding_dim, self.output_dim, self.freq_buckets)
        if min(dims) < 1:
            raise ConfigError("item tower dimensions must be positive")


@dataclass(frozen=True)
class UserTowerConfig:
    shared_dims: tuple[int, ...] = (64, 64)
    branch_dims: tuple[int, ...] = (64,)
    embedding_dim: int = 32
    output_dim: int = 32

    def __post_init__(self):
        if min((*self.shared_dims, *self.branch_dims, self.embedding_dim, self.output_dim)) < 1:
            raise ConfigError("user tower dimensions must be positive")


@dataclass(frozen=True)
class AdapterSchedule:
    """Epoch-indexed blend weight between main and regularizer branches.

    ``cdn``: ``1 - (t / (gamma T))**2`` with ``gamma > 1``;
    ``bbn``: ``1 - (t / T)**2``; ``fixed``: constant ``alpha0``.
    """

    variant: str
    total_epochs: int
    gamma: Optional[float] = None
    alpha0: float = 1.0

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be at least 1")
        if self.variant == "cdn":
            if self.gamma is None or not self.gamma > 1:
                raise ConfigError(f"the cdn schedule requires gamma > 1, got {self.gamma}")
        elif self.variant == "fixed":
            if not 0.0 <= self.alpha0 <= 1.0:
                raise ConfigError(f"fixed alpha must lie in [0, 1], got {self.alpha0}")
        elif self.variant != "bbn":
            raise ConfigError(f"unknown schedule variant {self.variant!r}")


def cumulative_alpha(t: float, total_epochs: int, gamma: float = 1.0) -> float:
    return 1.0 - (t / (gamma * total_epochs)) ** 2


def alpha(t: int, schedule: AdapterSchedule) -> float:
    if not 0 <= t <= schedule.total_epochs:
        raise ValueError(f"epoch {t} outside 0..{schedule.total_epochs}")
    if schedule.variant == "cdn":
        return cumulative_alpha(t, schedule.total_epochs, schedule.gamma)
    if schedule.variant == "bbn":
        return cumulative_alpha(t, schedule.total_epochs)
    return float(schedule.alpha0)


def frequency_buckets(freq: np.ndarray, n_buckets: int = 16) -> np.ndarray:
    """Bucket 0 for unseen items, else ``1 + floor(log2 freq)`` capped at ``n_buckets - 1``."""
    freq = np.asarray(freq)
    out = np.zeros(freq.shape, dtype=np.int64)
    seen = freq > 0
    out[seen] = np.minimum(1 + np.floor(np.log2(freq[seen])).astype(np.int64), n_buckets - 1)
    return out


@dataclass(frozen=True)
class ItemFeatureSplit:
    memorization_features: tuple[str, ...]
    generalization_features: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.memorization_features) & set(self.generalization_features)
        if overlap:
            raise ConfigError(f"features {sorted(overlap)} are in both groups")

    @classmethod
    def from_features(cls, features: Mapping[str, ItemFeature]) -> "ItemFeatureSplit":
        mem = ["item_id"]
        gen = []
        for name, f in features.items():
            (mem if is_unique_feature(f) else gen).append(name)
        return cls(tuple(mem), tuple(gen))


def is_unique_feature(f: ItemFeature) -> bool:
    """True when every item has exactly one value and no two items share it."""
    lengths = np.diff(f.offsets)
    return bool(np.all(lengths == 1) and np.unique(f.values).size == f.values.size)


@dataclass(frozen=True)
class Batch:
    users_m: np.ndarray
    items_m: np.ndarray
    users_r: Optional[np.ndarray] = None
    items_r: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.users_m)


# ---------------------------------------------------------------------------


def _dense_init(rng, fan_in: int, fan_out: int, relu: bool) -> np.ndarray:
    std = math.sqrt((2.0 if relu else 1.0) / fan_in)
    return rng.normal(0.0, std, size=(fan_in, fan_out))


def _init_mlp(store: ParamStore, rng, prefix: str, dims: Sequence[int], final_relu: bool) -> None:
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        last = k == len(dims) - 2
        store.add(f"{prefix}w{k}", _dense_init(rng, a, b, relu=not last or final_relu))
        store.add(f"{prefix}b{k}", np.zeros((1, b)))


def _mlp(tape: Tape, x: Node, prefix: str, n_layers: int, final_relu: bool) -> Node:
    for k in range(n_layers):
        x = tape.dense(x, tape.param(f"{prefix}w{k}"), tape.param(f"{prefix}b{k}"))
        if k < n_layers - 1 or final_relu:
            x = tape.relu(x)
    return x


def _mlp_params(dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class Expert:
    group: str  # "mem", "gen" or "all"
    hidden: tuple[int, ...]


class ItemTower:
    """Gated mixture of item experts.

    ``plain``: one expert over all features, no gate (the two-tower item side).
    ``mem_gen``: memorization experts read only the id embedding,
    generalization experts only the pooled generalization features, mixed by
    ``softmax(W onehot(log-freq bucket))``.
    ``unbalanced_balanced``: two experts over all features; expert 0 learns
    only from main-branch items and expert 1 only from regularizer-branch
    items, combined by the learned frequency gate.
    ``head_tail``: two experts over all features behind a hard 0-1 gate from
    the head/tail tags.
    """

    def __init__(
        self,
        config: ItemTowerConfig,
        n_items: int,
        features: Mapping[str, ItemFeature],
        item_freq: np.ndarray,
        design: str = "mem_gen",
        head_mask: Optional[np.ndarray] = None,
    ):
        if design not in ITEM_DESIGNS:
            raise ConfigError(f"unknown item tower design {design!r}")
        self.config = config
        self.n_items = n_items
        self.design = design
        self.split = ItemFeatureSplit.from_features(features)
        self.mem_features = [features[name] for name in self.split.memorization_features if name != "item_id"]
        self.gen_features = [features[name] for name in self.split.generalization_features]
        if design == "mem_gen" and not self.gen_features:
            raise ConfigError("mem_gen experts need at least one generalization feature")
        self.buckets = frequency_buckets(item_freq, config.freq_buckets)
        self.head_mask = None if head_mask is None else np.asarray(head_mask, dtype=bool)
        if design == "head_tail" and self.head_mask is None:
            raise ConfigError("head_tail experts need head/tail tags")

        hidden = tuple(config.expert_hidden_dims)
        if design == "plain":
            self.experts = [Expert("all", hidden)]
        elif design == "mem_gen":
            self.experts = [Expert("mem", hidden)] * config.n_mem_experts + [Expert("gen", hidden)] * config.n_gen_experts
        else:
            self.experts = [Expert("all", self._matched_hidden())] * 2

    # sizes ------------------------------------------------------------------

    def _input_dim(self, group: str) -> int:
        e = self.config.embedding_dim
        n_mem = 1 + len(self.mem_features)
        n_gen = len(self.gen_features)
        return {"mem": e * n_mem, "gen": e * n_gen, "all": e * (n_mem + n_gen)}[group]

    def _expert_params(self, expert: Expert) -> int:
        return _mlp_params((self._input_dim(expert.group), *expert.hidden, self.config.output_dim))

    def _matched_hidden(self) -> tuple[int, ...]:
        """Hidden widths for two all-feature experts whose size matches the mem/gen pair."""
        cfg = self.config
        target = _mlp_params((self._input_dim("mem"), *cfg.expert_hidden_dims, cfg.output_dim)) * cfg.n_mem_experts
        target += _mlp_params((self._input_dim("gen"), *cfg.expert_hidden_dims, cfg.output_dim)) * cfg.n_gen_experts
        h0 = cfg.expert_hidden_dims[0]
        best, best_gap = None, None
        for h in range(1, 4 * h0 + 1):
            dims = tuple(max(1, round(d * h / h0)) for d in cfg.expert_hidden_dims)
            gap = abs(2 * _mlp_params((self._input_dim("all"), *dims, cfg.output_dim)) - target)
            if best_gap is None or gap < best_gap:
                best, best_gap = dims, gap
        return best

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def has_learned_gate(self) -> bool:
        return self.design in ("mem_gen", "unbalanced_balanced")

    def mem_expert_mask(self) -> np.ndarray:
        return np.array([e.group == "mem" for e in self.experts])

    # parameters -------------------------------------------------------------

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        cfg = self.config
        store.add("item/emb/item_id", rng.normal(0.0, 0.1, size=(self.n_items, cfg.embedding_dim)))
        for f in self.mem_features + self.gen_features:
            store.add(f"item/emb/{f.name}", rng.normal(0.0, 0.1, size=(len(f.vocab), cfg.embedding_dim)))
        for k, e in enumerate(self.experts):
            dims = (self._input_dim(e.group), *e.hidden, cfg.output_dim)
            _init_mlp(store, rng, f"item/expert{k}/", dims, final_relu=False)
        if self.has_learned_gate:
            store.add("item/gate/w", np.zeros((cfg.freq_buckets, self.n_experts)))

    # forward ----------------------------------------------------------------

    @staticmethod
    def _bags(tape: Tape, features: Sequence[ItemFeature], items: np.ndarray) -> list[Node]:
        return [tape.embedding_bag(tape.param(f"item/emb/{f.name}"), f.values, f.offsets, items) for f in features]

    def _inputs(self, tape: Tape, items: np.ndarray) -> dict[str, Node]:
        out = {}
        groups = {e.group for e in self.experts}
        mem = gen = None
        if groups & {"mem", "all"}:
            mem = tape.gather_rows(tape.param("item/emb/item_id"), items)
            if self.mem_features:
                mem = tape.concat_rows(mem, *self._bags(tape, self.mem_features, items))
        if groups & {"gen", "all"} and self.gen_features:
            bags = self._bags(tape, self.gen_features, items)
            gen = bags[0] if len(bags) == 1 else tape.concat_rows(*bags)
        if "mem" in groups:
            out["mem"] = mem
        if "gen" in groups:
            out["gen"] = gen
        if "all" in groups:
            out["all"] = mem if gen is None else tape.concat_rows(mem, gen)
        return out

    def gate(self, tape: Tape, items: np.ndarray) -> Optional[Node]:
        if self.design == "plain":
            return None
        if self.design == "head_tail":
            head = self.head_mask[items]
            return tape.const(np.stack([head, ~head], axis=1).astype(np.float64))
        logits = tape.gather_rows(tape.param("item/gate/w"), self.buckets[items])
        return tape.softmax(logits)

    def forward(self, tape: Tape, items, branch: Optional[int] = None) -> Node:
        """Item embeddings.  ``branch`` (0 main, 1 regularizer) only matters for
        ``unbalanced_balanced``, where the other branch's expert is held fixed."""
        items = np.asarray(items, dtype=np.int64)
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise IndexError("item index outside vocabulary")
        inputs = self._inputs(tape, items)
        n_layers = len(self.config.expert_hidden_dims) + 1
        outs = [_mlp(tape, inputs[e.group], f"item/expert{k}/", n_layers, final_relu=False) for k, e in enumerate(self.experts)]
        g = self.gate(tape, items)
        if g is None:
            return outs[0]
        y = None
        for k, out in enumerate(outs):
            if self.design == "unbalanced_balanced" and branch is not None and k != branch:
                out = tape.stop_gradient(out)
            term = tape.mul_rows(out, tape.columns(g, k, k + 1))
            y = term if y is None else tape.add(y, term)
        return y

    def expert_outputs(self, tape: Tape, items) -> list[Node]:
        items = np.asarray(items, dtype=np.int64)
        inputs = self._inputs(tape, items)
        n_layers = len(self.config.expert_hidden_dims) + 1
        return [_mlp(tape, inputs[e.group], f"item/expert{k}/", n_layers, final_relu=False) for k, e in enumerate(self.experts)]


class UserTower:
    """``x = h(f(u))``; bilateral towers carry separate ``h_m``/``h_r`` heads."""

    def __init__(self, config: UserTowerConfig, n_users: int, bilateral: bool = True):
        self.config = config
        self.n_users = n_users
        self.bilateral = bilateral

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        cfg = self.config
        store.add("user/emb", rng.normal(0.0, 0.1, size=(self.n_users, cfg.embedding_dim)))
        _init_mlp(store, rng, "user/f/", (cfg.embedding_dim, *cfg.shared_dims), final_relu=True)
        head = (cfg.shared_dims[-1], *cfg.branch_dims, cfg.output_dim)
        _init_mlp(store, rng, "user/h_m/", head, final_relu=False)
        if self.bilateral:
            _init_mlp(store, rng, REGULARIZER_PREFIX, head, final_relu=False)

    def shared(self, tape: Tape, users) -> Node:
        """``f(u)``, the representation both heads read."""
        users = np.asarray(users, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise IndexError("user index outside vocabulary")
        z = tape.gather_rows(tape.param("user/emb"), users)
        return _mlp(tape, z, "user/f/", len(self.config.shared_dims), final_relu=True)

    def head(self, tape: Tape, z: Node, branch: str = MAIN) -> Node:
        if branch == REGULARIZER and not self.bilateral:
            raise ValueError("single-branch user tower has no regularizer head")
        prefix = "user/h_m/" if branch == MAIN else REGULARIZER_PREFIX
        return _mlp(tape, z, prefix, len(self.config.branch_dims) + 1, final_relu=False)

    def forward(self, tape: Tape, users, branch: str = MAIN) -> Node:
        return self.head(tape, self.shared(tape, users), branch)


class RetrievalModel:
    """Two towers plus the training objective.

    ``item_log_q`` (log sampling probability per item) enables the logQ
    logit correction; ``item_weights`` (raw per-item loss weights) enables
    per-row reweighting, normalized to mean 1 within each batch.
    """

    def __init__(
        self,
        user_tower: UserTower,
        item_tower: ItemTower,
        *,
        item_log_q: Optional[np.ndarray] = None,
        item_weights: Optional[np.ndarray] = None,
        logq_at_inference: bool = False,
    ):
        self.user_tower = user_tower
        self.item_tower = item_tower
        self.item_log_q = item_log_q
        self.item_weights = item_weights
        self.logq_at_inference = logq_at_inference

    @property
    def bilateral(self) -> bool:
        return self.user_tower.bilateral

    @property
    def n_items(self) -> int:
        return self.item_tower.n_items

    @property
    def n_users(self) -> int:
        return self.user_tower.n_users

    def init_params(self, seed: int) -> ParamStore:
        rng = np.random.default_rng([seed, 1])
        store = ParamStore()
        self.user_tower.init(store, rng)
        self.item_tower.init(store, rng)
        return store

    # training ---------------------------------------------------------------

    # Towers are functions of the id alone, so each distinct id in a batch is
    # computed once and the rows are gathered back.
    def _shared_users(self, tape: Tape, users: np.ndarray) -> Node:
        uniq, inv = np.unique(users, return_inverse=True)
        return tape.gather_rows(self.user_tower.shared(tape, uniq), inv)

    def _items(self, tape: Tape, items: np.ndarray, branch: Optional[int] = None) -> Node:
        uniq, inv = np.unique(items, return_inverse=True)
        return tape.gather_rows(self.item_tower.forward(tape, uniq, branch=branch), inv)

    def training_logits(self, tape: Tape, batch: Batch, alpha_t: float) -> tuple[Node, float]:
        """``L = alpha X_m Y_m^T + (1 - alpha) X_r Y_r^T`` over in-batch candidates.

        Both branches go through ``f`` and the item tower as one stacked batch.
        """
        n = len(batch.users_m)
        if self.bilateral and (batch.users_r is None or len(batch.users_r) != n or len(batch.items_r) != n):
            raise ShapeError(
                f"regularizer batch of size {0 if batch.users_r is None else len(batch.users_r)} "
                f"does not match main batch of size {n}"
            )
        if not self.bilateral or alpha_t == 1.0:
            # the regularizer term is multiplied by zero, so skip it
            x_m = self.user_tower.head(tape, self._shared_users(tape, batch.users_m), MAIN)
            y_m = self._items(tape, batch.items_m)
            logits = tape.matmul_t(x_m, y_m)
            alpha_t = 1.0
        else:
            uniq, inv = np.unique(np.concatenate([batch.users_m, batch.users_r]), return_inverse=True)
            z = self.user_tower.shared(tape, uniq)
            x_m = self.user_tower.head(tape, tape.gather_rows(z, inv[:n]), MAIN)
            x_r = self.user_tower.head(tape, tape.gather_rows(z, inv[n:]), REGULARIZER)
            if self.item_tower.design == "unbalanced_balanced":
                y_m = self._items(tape, batch.items_m, branch=0)
                y_r = self._items(tape, batch.items_r, branch=1)
            else:
                uniq, inv = np.unique(np.concatenate([batch.items_m, batch.items_r]), return_inverse=True)
                y = self.item_tower.forward(tape, uniq)
                y_m, y_r = tape.gather_rows(y, inv[:n]), tape.gather_rows(y, inv[n:])
            # [a x_m | (1-a) x_r] [y_m | y_r]^T sums both branch products in one product
            logits = tape.matmul_t(
                tape.concat_rows(tape.scale(x_m, alpha_t), tape.scale(x_r, 1.0 - alpha_t)),
                tape.concat_rows(y_m, y_r),
            )
        if self.item_log_q is not None:
            logits = tape.add_bias(logits, -self.item_log_q[batch.items_m])
        return logits, alpha_t

    def loss(self, tape: Tape, batch: Batch, alpha_t: float = 1.0) -> Node:
        """``alpha * XENT(L, main positives) + (1 - alpha) * XENT(L, regularizer positives)``.

        Batches are row-aligned, so both positive sets sit on the diagonal of
        the shared logit matrix and the two cross-entropy terms coincide.
        """
        logits, a = self.training_logits(tape, batch, alpha_t)
        weights = None
        if self.item_weights is not None:
            w = self.item_weights[batch.items_m]
            weights = w / w.mean()
        term = tape.softmax_xent(logits, None, weights)
        if not self.bilateral:
            return term
        return tape.add(tape.scale(term, a), tape.scale(term, 1.0 - a))

    cdn_loss = loss

    # inference --------------------------------------------------------------

    def user_embed(self, store: ParamStore, users, branch: str = MAIN) -> np.ndarray:
        return self.user_tower.forward(Tape(store), users, branch).value

    def item_embed(self, store: ParamStore, items=None) -> np.ndarray:
        if items is None:
            items = np.arange(self.n_items)
        return self.item_tower.forward(Tape(store), items).value

    def gate_weights(self, store: ParamStore, items=None) -> np.ndarray:
        if items is None:
            items = np.arange(self.n_items)
        g = self.item_tower.gate(Tape(store), np.asarray(items, dtype=np.int64))
        if g is None:
            raise ValueError("this item tower has no gate")
        return g.value

    def score_matrix(self, store: ParamStore, users, item_vectors: Optional[np.ndarray] = None) -> np.ndarray:
        """Main-branch scores ``x_m . y`` of ``users`` against the whole catalog."""
        if item_vectors is None:
            item_vectors = self.item_embed(store)
        scores = self.user_embed(store, users) @ item_vectors.T
        if self.logq_at_inference and self.item_log_q is not None:
            scores = scores - self.item_log_q[None, :]
        return scores

    def score(self, store: ParamStore, user: int, item: int) -> float:
        x = self.user_embed(store, [user])[0]
        y = self.item_embed(store, [item])[0]
        s = float(x @ y)
        if self.logq_at_inference and self.item_log_q is not None:
            s -= float(self.item_log_q[item])
        return s
