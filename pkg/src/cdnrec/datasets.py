"""Interaction logs, long-tail catalog statistics, splits and samplers.

Logs are column arrays (users, items, timestamps, labels) plus the user/item
vocabularies and per-item categorical features.  Every rating or feedback
row is treated as an implicit positive.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from cdnrec.errors import ConfigError, DataFormatError

HEAD, TAIL = "Head", "Tail"


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int
    label: int = 1


@dataclass(frozen=True, eq=False)
class ItemFeature:
    """One categorical item field.  Multi-valued fields (genres) are ragged:
    item ``i`` has values ``values[offsets[i]:offsets[i+1]]``."""

    name: str
    vocab: tuple[str, ...]
    offsets: np.ndarray
    values: np.ndarray

    @classmethod
    def from_lists(cls, name: str, per_item: Sequence[Sequence[str]]) -> "ItemFeature":
        vocab = sorted({v for vals in per_item for v in vals})
        index = {v: k for k, v in enumerate(vocab)}
        lengths = np.array([len(vals) for vals in per_item], dtype=np.int64)
        offsets = np.zeros(len(per_item) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        values = np.array([index[v] for vals in per_item for v in vals], dtype=np.int64)
        return cls(name, tuple(vocab), offsets, values)

    @property
    def n_items(self) -> int:
        return len(self.offsets) - 1

    def of(self, item: int) -> tuple[str, ...]:
        return tuple(self.vocab[v] for v in self.values[self.offsets[item] : self.offsets[item + 1]])

    def primary(self) -> list[str]:
        """First value of each item, or ``"unknown"``."""
        out = []
        for i in range(self.n_items):
            lo, hi = self.offsets[i], self.offsets[i + 1]
            out.append(self.vocab[self.values[lo]] if hi > lo else "unknown")
        return out


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(eq=False)
class InteractionLog:
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray
    user_ids: tuple
    item_ids: tuple
    item_features: dict[str, ItemFeature] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.users = _frozen(self.users, np.int64)
        self.items = _frozen(self.items, np.int64)
        self.timestamps = _frozen(self.timestamps, np.int64)
        self.labels = _frozen(self.labels, np.int8)
        n = len(self.users)
        if not (len(self.items) == len(self.timestamps) == len(self.labels) == n):
            raise ValueError("interaction columns have different lengths")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user index outside vocabulary")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item index outside vocabulary")
        for f in self.item_features.values():
            if f.n_items != self.n_items:
                raise ValueError(f"feature {f.name!r} covers {f.n_items} items, vocab has {self.n_items}")

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)

    def __getitem__(self, k: int) -> Interaction:
        return Interaction(int(self.users[k]), int(self.items[k]), int(self.timestamps[k]), int(self.labels[k]))

    def __iter__(self) -> Iterator[Interaction]:
        for k in range(len(self)):
            yield self[k]

    def item_index(self, raw_id) -> int:
        cache = self.__dict__.setdefault("_item_index", None)
        if cache is None:
            cache = self.__dict__["_item_index"] = {r: k for k, r in enumerate(self.item_ids)}
        return cache[raw_id]

    def user_index(self, raw_id) -> int:
        cache = self.__dict__.setdefault("_user_index", None)
        if cache is None:
            cache = self.__dict__["_user_index"] = {r: k for k, r in enumerate(self.user_ids)}
        return cache[raw_id]

    def subset(self, index) -> "InteractionLog":
        """Rows ``index`` (in the given order), sharing vocab and features."""
        index = np.asarray(index, dtype=np.int64)
        return InteractionLog(
            self.users[index],
            self.items[index],
            self.timestamps[index],
            self.labels[index],
            self.user_ids,
            self.item_ids,
            self.item_features,
        )

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items[self.labels > 0], minlength=self.n_items).astype(np.int64)

    def user_item_sets(self) -> list[set[int]]:
        out: list[set[int]] = [set() for _ in range(self.n_users)]
        for u, i in zip(self.users.tolist(), self.items.tolist()):
            out[u].add(i)
        return out


@dataclass(frozen=True, eq=False)
class CatalogStats:
    freq: np.ndarray
    rank: np.ndarray
    imbalance_factor: float
    is_head: Optional[np.ndarray] = None
    head_fraction: Optional[float] = None

    @property
    def n_items(self) -> int:
        return len(self.freq)

    @property
    def slice(self) -> np.ndarray:
        if self.is_head is None:
            raise ValueError("head/tail tags not assigned; call split_head_tail first")
        return np.where(self.is_head, HEAD, TAIL)

    @property
    def n_head(self) -> int:
        return int(self.is_head.sum()) if self.is_head is not None else 0


@dataclass(frozen=True, eq=False)
class SplitLog:
    train: InteractionLog
    valid: InteractionLog
    test: InteractionLog
    regularizer: Optional[InteractionLog] = None


# ---------------------------------------------------------------------------
# loaders


def _read_text(path) -> str:
    raw = Path(path).read_bytes()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        return raw.decode("latin-1")


def _sort_key(raw: str):
    return (0, int(raw), "") if raw.isdigit() else (1, 0, raw)


def load_movielens(ratings_path, movies_path) -> InteractionLog:
    """Read MovieLens ``::`` files; every rating becomes a positive.

    Item vocabulary is the set of rated movies, ordered by numeric id; users
    likewise.  Genres become the ``genre`` generalization feature.
    """
    genres: dict[str, list[str]] = {}
    for lineno, line in enumerate(_read_text(movies_path).splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 3 or not parts[0].strip():
            raise DataFormatError(f"{movies_path}:{lineno}: expected MovieID::Title::Genres")
        genres[parts[0].strip()] = [g for g in parts[2].strip().split("|") if g]

    raw_users, raw_items, stamps = [], [], []
    for lineno, line in enumerate(_read_text(ratings_path).splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise DataFormatError(f"{ratings_path}:{lineno}: expected UserID::MovieID::Rating::Timestamp")
        u, m, _, ts = (p.strip() for p in parts)
        try:
            ts_val = int(ts)
            float(parts[2])
        except ValueError:
            raise DataFormatError(f"{ratings_path}:{lineno}: non-numeric rating or timestamp") from None
        if m not in genres:
            raise DataFormatError(f"{ratings_path}:{lineno}: movie {m} not in {movies_path}")
        raw_users.append(u)
        raw_items.append(m)
        stamps.append(ts_val)

    user_ids = tuple(sorted(set(raw_users), key=_sort_key))
    item_ids = tuple(sorted(set(raw_items), key=_sort_key))
    uix = {r: k for k, r in enumerate(user_ids)}
    iix = {r: k for k, r in enumerate(item_ids)}
    users = np.array([uix[u] for u in raw_users], dtype=np.int64)
    items = np.array([iix[m] for m in raw_items], dtype=np.int64)
    feats = {"genre": ItemFeature.from_lists("genre", [genres[m] for m in item_ids])}
    return InteractionLog(
        users,
        items,
        np.array(stamps, dtype=np.int64),
        np.ones(len(users), dtype=np.int8),
        tuple(int(u) for u in user_ids),
        tuple(int(m) for m in item_ids),
        feats,
    )


def _year_bucket(year: str) -> str:
    try:
        y = int(year)
    except ValueError:
        return "unknown"
    if y < 1000 or y > 2100:
        return "unknown"
    return f"{y // 10 * 10}s"


def _csv_rows(path) -> Iterator[tuple[int, list[str]]]:
    text = Path(path).read_bytes().decode("latin-1")
    reader = csv.reader(io.StringIO(text), delimiter=";", quotechar='"', escapechar="\\")
    try:
        for row in reader:
            yield reader.line_num, row
    except csv.Error as exc:
        raise DataFormatError(f"{path}:{reader.line_num}: {exc}") from None


def load_bookcrossing(ratings_path, books_path) -> InteractionLog:
    """Read the BookCrossing CSV dump (``;``-separated, quoted, ISO-8859-1).

    Every rating row (explicit or implicit) is a positive.  Rows whose ISBN is
    missing from the books file are dropped; the dump has no timestamps, so
    the row position stands in for time.  ``log.info`` records
    ``kept``/``dropped`` counts.
    """
    books: dict[str, tuple[str, str, str]] = {}
    malformed_books = 0
    for lineno, row in _csv_rows(books_path):
        if lineno == 1 and row and row[0].strip().lower() == "isbn":
            continue
        if len(row) < 5:
            malformed_books += 1
            continue
        isbn = row[0].strip().upper()
        books[isbn] = (
            row[2].strip().lower() or "unknown",
            row[4].strip().lower() or "unknown",
            _year_bucket(row[3].strip()),
        )
    raw_users, raw_items = [], []
    dropped = 0
    for lineno, row in _csv_rows(ratings_path):
        if lineno == 1 and row and row[0].strip().lower().startswith("user"):
            continue
        if not row:
            continue
        if len(row) != 3:
            raise DataFormatError(f"{ratings_path}:{lineno}: expected 3 fields, got {len(row)}")
        isbn = row[1].strip().upper()
        if isbn not in books:
            dropped += 1
            continue
        raw_users.append(row[0].strip())
        raw_items.append(isbn)
    if not raw_users:
        raise DataFormatError(f"{ratings_path}: no rating rows reference a known book")

    user_ids = tuple(sorted(set(raw_users), key=_sort_key))
    item_ids = tuple(sorted(set(raw_items)))
    uix = {r: k for k, r in enumerate(user_ids)}
    iix = {r: k for k, r in enumerate(item_ids)}
    feats = {
        name: ItemFeature.from_lists(name, [[books[b][k]] for b in item_ids])
        for k, name in enumerate(("author", "publisher", "year_bucket"))
    }
    n = len(raw_users)
    log = InteractionLog(
        np.array([uix[u] for u in raw_users], dtype=np.int64),
        np.array([iix[b] for b in raw_items], dtype=np.int64),
        np.arange(n, dtype=np.int64),
        np.ones(n, dtype=np.int8),
        user_ids,
        item_ids,
        feats,
    )
    log.info.update(kept=n, dropped=dropped, malformed_books=malformed_books)
    return log


# ---------------------------------------------------------------------------
# statistics and splits


def build_stats(log: InteractionLog) -> CatalogStats:
    if len(log) == 0:
        raise ValueError("cannot build catalog statistics from an empty log")
    freq = log.item_counts()
    order = np.lexsort((np.arange(log.n_items), -freq))
    rank = np.empty(log.n_items, dtype=np.int64)
    rank[order] = np.arange(1, log.n_items + 1)
    positive = freq[freq > 0]
    return CatalogStats(freq, rank, float(positive.max() / positive.min()))


def n_head_items(n_items: int, head_fraction: float) -> int:
    return math.ceil(round(head_fraction * n_items, 9))


def split_head_tail(stats: CatalogStats, head_fraction: float) -> CatalogStats:
    if not 0 < head_fraction < 1:
        raise ConfigError(f"head_fraction must lie in (0, 1), got {head_fraction}")
    is_head = stats.rank <= n_head_items(stats.n_items, head_fraction)
    return replace(stats, is_head=is_head, head_fraction=head_fraction)


def chrono_split(log: InteractionLog, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> SplitLog:
    """Per-user chronological split.  Users with fewer than 3 events stay in train."""
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    _, r_valid, r_test = ratios
    order = np.lexsort((np.arange(len(log)), log.timestamps, log.users))
    users_sorted = log.users[order]
    bounds = np.flatnonzero(np.diff(users_sorted)) + 1
    parts = {"train": [], "valid": [], "test": []}
    for group in np.split(order, bounds):
        n = group.size
        if n == 0:
            continue
        if n < 3:
            parts["train"].append(group)
            continue
        n_test = max(1, math.floor(r_test * n + 0.5 + 1e-9))
        n_valid = max(1, math.floor(r_valid * n + 0.5 + 1e-9))
        n_train = max(1, n - n_test - n_valid)
        n_valid = n - n_train - n_test
        parts["train"].append(group[:n_train])
        parts["valid"].append(group[n_train : n_train + n_valid])
        parts["test"].append(group[n_train + n_valid :])

    def take(name):
        chunks = parts[name]
        idx = np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
        return log.subset(idx)

    return SplitLog(take("train"), take("valid"), take("test"))


def build_regularizer_distribution(train: InteractionLog, stats: CatalogStats, seed: int) -> InteractionLog:
    """Rebalanced copy of ``train``: every tail interaction, and for each head
    item a seeded uniform subsample capped at the largest tail-item frequency."""
    if stats.is_head is None:
        raise ValueError("stats need head/tail tags")
    freq = train.item_counts()
    if freq.shape != stats.freq.shape or not np.array_equal(freq, stats.freq):
        raise ValueError("stats were not computed on this training log")
    tail = ~stats.is_head
    if not tail.any():
        raise ValueError("no tail items: regularizer distribution is undefined")
    cap = int(freq[tail].max())
    if cap == 0:
        raise ValueError("tail items have no training interactions: regularizer distribution is empty")
    rng = np.random.default_rng(seed)
    order = np.argsort(train.items, kind="stable")
    starts = np.zeros(train.n_items + 1, dtype=np.int64)
    np.cumsum(freq, out=starts[1:])
    keep = [order[starts[i] : starts[i + 1]] for i in np.flatnonzero(tail & (freq > 0))]
    for i in np.flatnonzero(stats.is_head):
        rows = order[starts[i] : starts[i + 1]]
        if rows.size > cap:
            rows = rng.choice(rows, size=cap, replace=False)
        keep.append(rows)
    idx = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    return train.subset(idx)


def prepare_split(
    log: InteractionLog,
    head_fraction: float,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[SplitLog, CatalogStats]:
    """Split, tag head/tail on the training slice and attach the regularizer log."""
    split = chrono_split(log, ratios)
    stats = split_head_tail(build_stats(split.train), head_fraction)
    reg = build_regularizer_distribution(split.train, stats, seed)
    return replace(split, regularizer=reg), stats


# ---------------------------------------------------------------------------
# synthetic data


def synth_zipf(
    n_users: int,
    n_items: int,
    exponent: float,
    n_events: int,
    n_genres: int,
    seed: int,
    *,
    pref_prob: float = 0.7,
    taste_dim: int = 8,
    taste_strength: float = 1.0,
    min_user_events: int = 5,
) -> InteractionLog:
    """Long-tail implicit feedback with genre structure.

    Item ``i`` has base popularity ``(i + 1) ** -exponent``.  Each item gets a
    primary genre and, with probability 0.3, a second one.  Each user has two
    preferred genres: with probability ``pref_prob`` a draw comes from items in
    those genres (popularity times a latent user-item affinity), otherwise
    from global popularity.  A user never repeats an item.  The affinity term
    gives item identity signal beyond genre.
    """
    if min(n_users, n_items, n_events, n_genres) <= 0 or exponent < 0:
        raise ConfigError("synth_zipf needs positive counts and a non-negative exponent")
    rng = np.random.default_rng(seed)
    pop = (np.arange(1, n_items + 1, dtype=np.float64)) ** (-exponent)
    pop /= pop.sum()

    primary = rng.integers(0, n_genres, size=n_items)
    second = rng.integers(0, n_genres, size=n_items)
    has_second = (rng.random(n_items) < 0.3) & (second != primary)
    item_genre = np.zeros((n_items, n_genres), dtype=bool)
    item_genre[np.arange(n_items), primary] = True
    item_genre[np.flatnonzero(has_second), second[has_second]] = True

    user_pref = np.zeros((n_users, n_genres), dtype=bool)
    for u in range(n_users):
        user_pref[u, rng.choice(n_genres, size=min(2, n_genres), replace=False)] = True

    user_taste = rng.normal(size=(n_users, taste_dim)) / math.sqrt(taste_dim)
    item_taste = rng.normal(size=(n_items, taste_dim))

    activity = rng.lognormal(0.0, 0.5, size=n_users)
    extra = max(n_events - min_user_events * n_users, 0)
    counts = min_user_events + rng.multinomial(extra, activity / activity.sum())
    counts = np.minimum(counts, max(1, n_items // 2))

    users, items = [], []
    for u in range(n_users):
        match = (item_genre & user_pref[u]).any(axis=1)
        pref = pop * match * np.exp(taste_strength * item_taste @ user_taste[u])
        total = pref.sum()
        p = (1 - pref_prob) * pop + (pref_prob * pref / total if total > 0 else pref_prob * pop)
        k = int(counts[u])
        # Gumbel top-k: sampling without replacement proportional to p
        with np.errstate(divide="ignore"):  # p == 0 items can never be drawn
            keys = np.log(p) + rng.gumbel(size=n_items)
        chosen = np.argpartition(-keys, k - 1)[:k]
        chosen = chosen[np.argsort(-keys[chosen])]
        users.append(np.full(k, u, dtype=np.int64))
        items.append(chosen.astype(np.int64))
    users = np.concatenate(users)
    items = np.concatenate(items)
    stamps = rng.integers(0, 10**9, size=users.size)
    order = np.argsort(stamps, kind="stable")
    genre_lists = [[f"g{g}" for g in np.flatnonzero(item_genre[i])] for i in range(n_items)]
    return InteractionLog(
        users[order],
        items[order],
        stamps[order],
        np.ones(users.size, dtype=np.int8),
        tuple(range(n_users)),
        tuple(range(n_items)),
        {"genre": ItemFeature.from_lists("genre", genre_lists)},
    )


# ---------------------------------------------------------------------------
# prepared-dataset cache

CACHE_VERSION = 1
_SPLITS = ("train", "valid", "test", "regularizer")


def save_prepared(directory, split: SplitLog, stats: CatalogStats, extra: dict | None = None) -> Path:
    """Write ``manifest.json``, vocab/feature JSON and one ``<split>.bin`` per split.

    Each ``.bin`` is a little-endian int64 array of shape ``(n, 4)`` holding
    ``user, item, timestamp, label`` rows.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    train = split.train
    for name in _SPLITS:
        log = getattr(split, name)
        if log is None:
            continue
        rows = np.stack([log.users, log.items, log.timestamps, log.labels.astype(np.int64)], axis=1)
        (d / f"{name}.bin").write_bytes(np.ascontiguousarray(rows, dtype="<i8").tobytes())
    (d / "vocab.json").write_text(json.dumps({"users": list(train.user_ids), "items": list(train.item_ids)}))
    feats = {
        f.name: {"vocab": list(f.vocab), "offsets": f.offsets.tolist(), "values": f.values.tolist()}
        for f in train.item_features.values()
    }
    (d / "features.json").write_text(json.dumps(feats))
    manifest = {
        "version": CACHE_VERSION,
        "n_users": train.n_users,
        "n_items": train.n_items,
        "counts": {name: len(getattr(split, name)) for name in _SPLITS if getattr(split, name) is not None},
        "imbalance_factor": stats.imbalance_factor,
        "head_fraction": stats.head_fraction,
        "n_head": stats.n_head,
        "n_tail": stats.n_items - stats.n_head,
        "layout": "int64 little-endian rows: user, item, timestamp, label",
    }
    manifest.update(extra or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_prepared(directory) -> tuple[SplitLog, CatalogStats, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    vocab = json.loads((d / "vocab.json").read_text())
    feats_raw = json.loads((d / "features.json").read_text())
    feats = {
        name: ItemFeature(
            name,
            tuple(f["vocab"]),
            np.array(f["offsets"], dtype=np.int64),
            np.array(f["values"], dtype=np.int64),
        )
        for name, f in feats_raw.items()
    }
    user_ids, item_ids = tuple(vocab["users"]), tuple(vocab["items"])
    logs = {}
    for name in _SPLITS:
        path = d / f"{name}.bin"
        if not path.exists():
            logs[name] = None
            continue
        rows = np.frombuffer(path.read_bytes(), dtype="<i8").reshape(-1, 4)
        logs[name] = InteractionLog(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3], user_ids, item_ids, feats)
    split = SplitLog(**logs)
    stats = build_stats(split.train)
    if manifest.get("head_fraction") is not None:
        stats = split_head_tail(stats, manifest["head_fraction"])
    return split, stats, manifest
