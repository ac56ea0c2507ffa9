"""Full-catalog ranking metrics sliced by head/tail, gate analysis, embedding export."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from cdnrec.datasets import HEAD, TAIL, CatalogStats, InteractionLog
from cdnrec.model import RetrievalModel
from cdnrec.numerics import ParamStore

OVERALL = "Overall"
SLICES = (OVERALL, HEAD, TAIL)


def hr_ndcg_at_k(ranks, k: int) -> tuple[float, float]:
    """Single-target HR@K and NDCG@K (``1 / log2(rank + 1)`` inside the top K)."""
    if k < 1:
        raise ValueError(f"K must be at least 1, got {k}")
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("no ranks to score")
    if np.any(ranks < 1):
        raise ValueError("ranks are 1-based")
    hit = ranks <= k
    gain = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(hit.mean()), float(gain.mean())


def rank_of_target(
    model: RetrievalModel,
    store: ParamStore,
    user: int,
    target: int,
    exclusions: Iterable[int] = (),
) -> int:
    """1-based rank of ``target`` among non-excluded items; ties go to the lower index."""
    if not 0 <= target < model.n_items:
        raise IndexError(f"unknown item {target}")
    excl = set(int(i) for i in exclusions)
    if target in excl:
        raise ValueError("target item is among the exclusions")
    scores = model.score_matrix(store, [user])[0]
    s = scores[target]
    keep = np.ones(model.n_items, dtype=bool)
    keep[list(excl)] = False
    idx = np.arange(model.n_items)
    better = (scores > s) | ((scores == s) & (idx < target))
    return int((better & keep).sum()) + 1


def seen_items(logs: Sequence[InteractionLog], n_users: int) -> list[np.ndarray]:
    """Per-user sorted arrays of items appearing in any of ``logs``."""
    if not logs:
        return [np.zeros(0, dtype=np.int64)] * n_users
    users = np.concatenate([l.users for l in logs])
    items = np.concatenate([l.items for l in logs])
    order = np.lexsort((items, users))
    users, items = users[order], items[order]
    bounds = np.searchsorted(users, np.arange(n_users + 1))
    return [np.unique(items[bounds[u] : bounds[u + 1]]) for u in range(n_users)]


def compute_ranks(
    model: RetrievalModel,
    store: ParamStore,
    targets: InteractionLog,
    exclude: Sequence[InteractionLog] = (),
    chunk: int = 1024,
) -> np.ndarray:
    """Rank of every event's target item for its user, one entry per event.

    Items the user interacted with in ``exclude`` are removed from the
    candidate set, except the target itself.
    """
    n = len(targets)
    ranks = np.zeros(n, dtype=np.int64)
    if n == 0:
        return ranks
    item_vecs = model.item_embed(store)
    excluded = seen_items(exclude, model.n_users)
    order = np.argsort(targets.users, kind="stable")
    idx_all = np.arange(model.n_items)
    for lo in range(0, n, chunk):
        ev = order[lo : lo + chunk]
        users = targets.users[ev]
        tgt = targets.items[ev]
        uniq, inv = np.unique(users, return_inverse=True)
        scores = model.score_matrix(store, uniq, item_vecs)
        s_t = scores[inv, tgt]
        masked = scores.copy()
        for r, u in enumerate(uniq):
            masked[r, excluded[u]] = -np.inf
        rows = masked[inv]
        better = (rows > s_t[:, None]) | ((rows == s_t[:, None]) & (idx_all[None, :] < tgt[:, None]))
        ranks[ev] = better.sum(axis=1) + 1
    return ranks


@dataclass
class SliceMetrics:
    hr: float  # percent
    ndcg: float  # percent
    n_events: int
    hr_sem: Optional[float] = None
    ndcg_sem: Optional[float] = None


@dataclass
class EvalReport:
    k: int
    slices: dict[str, Optional[SliceMetrics]]
    n_trials: int = 1
    trials: list[dict] = field(default_factory=list)

    def metric(self, slice_name: str, name: str = "hr") -> Optional[float]:
        m = self.slices.get(slice_name)
        return None if m is None else getattr(m, name)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_trials": self.n_trials,
            "slices": {s: (None if m is None else asdict(m)) for s, m in self.slices.items()},
            "trials": self.trials,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        slices = {s: (None if m is None else SliceMetrics(**m)) for s, m in d["slices"].items()}
        return cls(d["k"], slices, d.get("n_trials", 1), list(d.get("trials", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report_from_ranks(ranks: np.ndarray, target_items: np.ndarray, is_head: np.ndarray, k: int) -> EvalReport:
    head = is_head[target_items]
    slices: dict[str, Optional[SliceMetrics]] = {}
    for name, mask in ((OVERALL, np.ones_like(head)), (HEAD, head), (TAIL, ~head)):
        if not mask.any():
            slices[name] = None
            continue
        hr, ndcg = hr_ndcg_at_k(ranks[mask], k)
        slices[name] = SliceMetrics(100.0 * hr, 100.0 * ndcg, int(mask.sum()))
    return EvalReport(k, slices)


def evaluate(
    model: RetrievalModel,
    store: ParamStore,
    targets: InteractionLog,
    stats: CatalogStats,
    ks: Sequence[int] = (50,),
    exclude: Sequence[InteractionLog] = (),
) -> dict[int, EvalReport]:
    """Per-slice HR/NDCG for each K.  A test event's slice is its target item's slice."""
    if stats.is_head is None:
        raise ValueError("stats need head/tail tags")
    ranks = compute_ranks(model, store, targets, exclude)
    return {k: report_from_ranks(ranks, targets.items, stats.is_head, k) for k in ks}


def sem(values: Sequence[float]) -> Optional[float]:
    """Standard error of the mean (sample std over sqrt(n)); ``None`` for n < 2."""
    if len(values) < 2:
        return None
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def aggregate(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean and standard error across independent trials."""
    if not reports:
        raise ValueError("nothing to aggregate")
    k = reports[0].k
    if any(r.k != k for r in reports):
        raise ValueError("reports use different K")
    slices = {}
    for name in SLICES:
        present = [r.slices.get(name) for r in reports if r.slices.get(name) is not None]
        if not present:
            slices[name] = None
            continue
        hrs = [m.hr for m in present]
        ndcgs = [m.ndcg for m in present]
        slices[name] = SliceMetrics(
            float(np.mean(hrs)),
            float(np.mean(ndcgs)),
            int(round(np.mean([m.n_events for m in present]))),
            sem(hrs),
            sem(ndcgs),
        )
    return EvalReport(k, slices, len(reports), [r.to_dict()["slices"] for r in reports])


def _fmt(value: Optional[float], err: Optional[float]) -> str:
    if value is None:
        return "-"
    return f"{value:.2f}" if err is None else f"{value:.2f}±{err:.2f}"


def format_table(reports: Mapping[str, EvalReport]) -> str:
    """Aligned text table: one row per method, Overall/Head/Tail x HR/NDCG columns."""
    if not reports:
        return ""
    k = next(iter(reports.values())).k
    header1 = ["Measure%"] + [s for s in SLICES for _ in (0, 1)]
    header2 = [""] + [f"{m}@{k}" for _ in SLICES for m in ("HR", "NDCG")]
    rows = []
    for label, rep in reports.items():
        row = [label]
        for s in SLICES:
            m = rep.slices.get(s)
            row.append(_fmt(None if m is None else m.hr, None if m is None else m.hr_sem))
            row.append(_fmt(None if m is None else m.ndcg, None if m is None else m.ndcg_sem))
        rows.append(row)
    table = [header1, header2] + rows
    widths = [max(len(r[c]) for r in table) for c in range(len(header1))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in table]
    lines.insert(2, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def report_rows(reports: Mapping[str, EvalReport]) -> list[dict]:
    """Long-format rows (label, slice, metric, value, sem) for CSV output."""
    out = []
    for label, rep in reports.items():
        for s in SLICES:
            m = rep.slices.get(s)
            for metric in ("hr", "ndcg"):
                out.append(
                    {
                        "label": label,
                        "k": rep.k,
                        "slice": s,
                        "metric": f"{metric.upper()}@{rep.k}",
                        "value": None if m is None else getattr(m, metric),
                        "sem": None if m is None else getattr(m, f"{metric}_sem"),
                    }
                )
    return out


# ---------------------------------------------------------------------------
# gates


@dataclass
class GateReport:
    memorization: dict[str, float]
    generalization: dict[str, float]
    n_items: dict[str, int]

    def to_dict(self) -> dict:
        return asdict(self)


def gate_report(model: RetrievalModel, store: ParamStore, stats: CatalogStats) -> GateReport:
    """Mean gate mass on memorization vs generalization experts per item slice."""
    tower = model.item_tower
    if tower.design != "mem_gen":
        raise ValueError(f"gate analysis needs memorization/generalization experts; this model uses {tower.design!r}")
    if stats.is_head is None:
        raise ValueError("stats need head/tail tags")
    g = model.gate_weights(store)
    mem = g[:, tower.mem_expert_mask()].sum(axis=1)
    gen = g[:, ~tower.mem_expert_mask()].sum(axis=1)
    out_mem, out_gen, counts = {}, {}, {}
    for name, mask in ((OVERALL, np.ones(len(mem), dtype=bool)), (HEAD, stats.is_head), (TAIL, ~stats.is_head)):
        counts[name] = int(mask.sum())
        if mask.any():
            out_mem[name] = float(mem[mask].mean())
            out_gen[name] = float(gen[mask].mean())
    return GateReport(out_mem, out_gen, counts)


# ---------------------------------------------------------------------------
# embeddings


def export_embeddings(
    model: RetrievalModel,
    store: ParamStore,
    items: Sequence[int],
    labels: Sequence[str],
    path,
    item_ids: Optional[Sequence] = None,
) -> Path:
    """TSV of main-branch item embeddings: ``item_id``, ``label``, then one column per dimension."""
    items = np.asarray(items, dtype=np.int64)
    if len(labels) != len(items):
        raise ValueError("one label per item required")
    dim = model.item_tower.config.output_dim
    vecs = model.item_embed(store, items) if items.size else np.zeros((0, dim))
    lines = ["\t".join(["item_id", "label"] + [f"e{d}" for d in range(dim)])]
    for k, i in enumerate(items):
        raw = item_ids[i] if item_ids is not None else int(i)
        lines.append("\t".join([str(raw), str(labels[k])] + [repr(float(v)) for v in vecs[k]]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
