"""Report figures rendered to image files with the Agg backend."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from cdnrec.evaluation import SLICES, EvalReport, GateReport  # noqa: E402

_SLICE_COLORS = {"Overall": "#333333", "Head": "#1f77b4", "Tail": "#d62728"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_gates(report: GateReport, path) -> Path:
    """Stacked bars of memorization vs generalization gate mass per item slice."""
    names = [s for s in SLICES if s in report.memorization]
    mem = [report.memorization[s] for s in names]
    gen = [report.generalization[s] for s in names]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(names, mem, color="#4c72b0", label="memorization")
    ax.bar(names, gen, bottom=mem, color="#dd8452", label="generalization")
    for x, m in enumerate(mem):
        ax.text(x, m / 2, f"{m:.2f}", ha="center", va="center", color="white", fontsize=9)
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean gate weight")
    ax.legend(loc="upper right", fontsize=8, frameon=False)
    return _save(fig, path)


def plot_gamma_sweep(reports: Mapping[float, EvalReport], path, metric: str = "ndcg") -> Path:
    """Metric per slice against gamma (log-scaled x axis)."""
    gammas = sorted(reports)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for s in SLICES:
        ys = [reports[g].metric(s, metric) for g in gammas]
        if any(y is None for y in ys):
            continue
        errs = [getattr(reports[g].slices[s], f"{metric}_sem") for g in gammas]
        if all(e is not None for e in errs):
            ax.errorbar(gammas, ys, yerr=errs, marker="o", capsize=3, color=_SLICE_COLORS[s], label=s)
        else:
            ax.plot(gammas, ys, marker="o", color=_SLICE_COLORS[s], label=s)
    k = reports[gammas[0]].k
    ax.set_xscale("log")
    ax.set_xticks(gammas)
    ax.set_xticklabels([f"{g:g}" for g in gammas])
    ax.set_xlabel("gamma")
    ax.set_ylabel(f"{metric.upper()}@{k} (%)")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)


def plot_head_tail(reports: Mapping[str, EvalReport], path) -> Path:
    """Tail HR against overall HR, one point per method."""
    fig, ax = plt.subplots(figsize=(4.5, 3.6))
    k = None
    for label, rep in reports.items():
        k = rep.k
        x, y = rep.metric("Tail"), rep.metric("Overall")
        if x is None or y is None:
            continue
        ax.scatter([x], [y], s=30)
        ax.annotate(label, (x, y), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel(f"Tail HR@{k} (%)")
    ax.set_ylabel(f"Overall HR@{k} (%)")
    return _save(fig, path)


def plot_training_curves(histories: Mapping[str, Sequence[float]], path) -> Path:
    """Mean training loss per epoch for one or more runs."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, losses in histories.items():
        ax.plot(range(1, len(losses) + 1), losses, marker=".", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend(fontsize=8, frameon=False)
    return _save(fig, path)
