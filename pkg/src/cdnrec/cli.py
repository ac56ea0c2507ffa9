"""``cdnrec`` command line: prepare, train, evaluate, gates, export-embeddings, sweep-gamma.

Every command takes an experiment config (YAML, see :mod:`cdnrec.config`)
and writes under the config's ``run_dir``.  Failures print one JSON line
``{"error": <category>, "message": ...}`` to stderr and exit with the
category's code (see ``EXIT_CODES``).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from cdnrec import __version__
from cdnrec.baselines import MethodConfig
from cdnrec.config import ExperimentConfig, load_config
from cdnrec.datasets import (
    HEAD,
    TAIL,
    load_bookcrossing,
    load_movielens,
    load_prepared,
    prepare_split,
    save_prepared,
    synth_zipf,
)
from cdnrec.errors import CDNError, ConfigError
from cdnrec.evaluation import (
    EvalReport,
    aggregate,
    evaluate,
    export_embeddings,
    format_table,
    gate_report,
    report_rows,
)
from cdnrec.training import PreparedData, fit, load_trained

log = logging.getLogger("cdnrec")

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "data": 4,
    "shape": 5,
    "numeric": 6,
    "io": 7,
    "internal": 1,
}


class UsageError(CDNError):
    category = "usage"


# ---------------------------------------------------------------------------
# data


def _raw_log(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds.source == "zipf":
        z = ds.zipf
        return synth_zipf(z.n_users, z.n_items, z.exponent, z.n_events, z.n_genres, z.seed)
    root = Path(ds.path)
    if ds.source == "movielens":
        return load_movielens(root / "ratings.dat", root / "movies.dat")
    return load_bookcrossing(root / "BX-Book-Ratings.csv", root / "BX-Books.csv")


def _dataset_key(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg.dataset)
    d.pop("cache_dir")
    return json.loads(json.dumps(d))


def load_data(cfg: ExperimentConfig) -> PreparedData:
    """From the prepared cache when it matches the config, otherwise from source."""
    cache = cfg.dataset.cache_dir
    if cache and (Path(cache) / "manifest.json").exists():
        split, stats, manifest = load_prepared(cache)
        if manifest.get("dataset") != _dataset_key(cfg):
            raise ConfigError(f"cache {cache} was prepared from a different dataset config; rerun `prepare`")
        return PreparedData(split, stats)
    split, stats = prepare_split(_raw_log(cfg), cfg.dataset.head_fraction, cfg.dataset.split, cfg.dataset.seed)
    return PreparedData(split, stats)


# ---------------------------------------------------------------------------
# run directory


def _run_dir(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.run_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_manifest(run_dir: Path, cfg: ExperimentConfig, command: str, outputs: Sequence[str]) -> None:
    path = run_dir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {"commands": {}}
    manifest["version"] = __version__
    manifest["config"] = cfg.to_dict()
    manifest["commands"][command] = sorted(outputs)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _trial_dirs(run_dir: Path) -> list[Path]:
    return sorted(p for p in run_dir.glob("trial*") if (p / "final.ckpt").exists())


def _checkpoints(run_dir: Path, explicit: Optional[str]) -> list[Path]:
    if explicit:
        p = Path(explicit)
        if not p.exists():
            raise FileNotFoundError(2, "no such checkpoint", str(p))
        return [p]
    found = [d / "final.ckpt" for d in _trial_dirs(run_dir)]
    if not found:
        raise FileNotFoundError(2, "no trained checkpoints; run `train` first", str(run_dir))
    return found


def _write_reports(out_dir: Path, reports: dict[int, EvalReport], label: str) -> list[str]:
    written = []
    for k, rep in reports.items():
        (out_dir / f"report@{k}.json").write_text(rep.to_json() + "\n")
        (out_dir / f"report@{k}.txt").write_text(format_table({label: rep}))
        written += [f"report@{k}.json", f"report@{k}.txt"]
    return written


def _evaluate_checkpoints(paths: Sequence[Path], data: PreparedData, ks: Sequence[int], split: str):
    targets = data.split.test if split == "test" else data.split.valid
    exclude = (data.split.train, data.split.valid) if split == "test" else (data.split.train,)
    per_k: dict[int, list[EvalReport]] = {k: [] for k in ks}
    for p in paths:
        model, store, _ = load_trained(p, data)
        for k, rep in evaluate(model, store, targets, data.stats, ks, exclude).items():
            per_k[k].append(rep)
    return {k: aggregate(reps) for k, reps in per_k.items()}


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: ExperimentConfig, args) -> int:
    if not cfg.dataset.cache_dir:
        raise ConfigError("dataset.cache_dir must be set for `prepare`")
    cache = Path(cfg.dataset.cache_dir)
    key = _dataset_key(cfg)
    manifest_path = cache / "manifest.json"
    if manifest_path.exists() and json.loads(manifest_path.read_text()).get("dataset") == key:
        manifest = json.loads(manifest_path.read_text())
        print(f"cache {cache} is up to date")
    else:
        split, stats = prepare_split(_raw_log(cfg), cfg.dataset.head_fraction, cfg.dataset.split, cfg.dataset.seed)
        save_prepared(cache, split, stats, {"dataset": key})
        manifest = json.loads(manifest_path.read_text())
        print(f"wrote {cache}")
    print(f"users={manifest['n_users']} items={manifest['n_items']} events={manifest['counts']}")
    print(f"IF={manifest['imbalance_factor']:.2f} head={manifest['n_head']} tail={manifest['n_tail']}")
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    trials = args.trials or cfg.eval.trials
    data = load_data(cfg)
    run_dir = _run_dir(cfg)
    outputs, failures = [], []
    per_k: dict[int, list[EvalReport]] = {k: [] for k in cfg.eval.ks}
    for t in range(trials):
        train_cfg = dataclasses.replace(cfg.train, seed=cfg.train.seed + t)
        trial_dir = run_dir / f"trial{t}"
        result = fit(
            cfg.method,
            train_cfg,
            data,
            item_config=cfg.model.item,
            user_config=cfg.model.user,
            run_dir=trial_dir,
            resume=args.resume,
        )
        failures += result.checkpoint_errors
        if trial_dir.exists():
            outputs += [f"trial{t}/{p.name}" for p in sorted(trial_dir.iterdir())]
        reports = evaluate(
            result.model,
            result.store,
            data.split.test,
            data.stats,
            cfg.eval.ks,
            (data.split.train, data.split.valid),
        )
        for k, rep in reports.items():
            per_k[k].append(rep)
        r = reports[cfg.eval.ks[0]]
        print(
            f"trial {t}: seed={train_cfg.seed} loss={result.history.records[-1].loss:.4f} "
            f"HR@{r.k} overall={r.metric('Overall'):.2f}",
            flush=True,
        )
    agg = {k: aggregate(reps) for k, reps in per_k.items()}
    outputs += _write_reports(run_dir, agg, cfg.method.name)
    if args.plots:
        from cdnrec.plotting import plot_training_curves
        from cdnrec.training import RunHistory

        curves = {
            d.name: [r.loss for r in RunHistory.read(d / "history.jsonl").records] for d in _trial_dirs(run_dir)
        }
        plot_training_curves(curves, run_dir / "training_loss.png")
        outputs.append("training_loss.png")
    _write_manifest(run_dir, cfg, "train", outputs)
    print(format_table({cfg.method.name: agg[cfg.eval.ks[0]]}), end="")
    if failures:
        raise OSError(f"checkpoint writes failed: {'; '.join(failures)}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    data = load_data(cfg)
    run_dir = _run_dir(cfg)
    paths = _checkpoints(run_dir, args.checkpoint)
    if args.gates:
        _, _, meta = load_trained(paths[0], data)
        design = MethodConfig(**meta["method"]).item_design
        if design != "mem_gen":
            raise UsageError(f"gate analysis needs a memorization/generalization item tower; checkpoint uses {design!r}")
    reports = _evaluate_checkpoints(paths, data, cfg.eval.ks, args.split)
    out = run_dir / f"eval_{args.split}"
    out.mkdir(exist_ok=True)
    written = [f"{out.name}/{p}" for p in _write_reports(out, reports, cfg.method.name)]
    if args.plots:
        from cdnrec.plotting import plot_head_tail

        plot_head_tail({cfg.method.name: reports[cfg.eval.ks[0]]}, out / "head_tail.png")
        written.append(f"{out.name}/head_tail.png")
    if args.gates:
        written += _gates(cfg, data, paths, out, args.plots)
    _write_manifest(run_dir, cfg, "evaluate", written)
    for k in cfg.eval.ks:
        print(format_table({cfg.method.name: reports[k]}), end="")
    return 0


def _gates(cfg, data, paths, out: Path, plots: bool) -> list[str]:
    reps = []
    for p in paths:
        model, store, _ = load_trained(p, data)
        reps.append(gate_report(model, store, data.stats))
    merged = dataclasses.replace(
        reps[0],
        memorization={s: float(np.mean([r.memorization[s] for r in reps])) for s in reps[0].memorization},
        generalization={s: float(np.mean([r.generalization[s] for r in reps])) for s in reps[0].generalization},
    )
    (out / "gates.json").write_text(json.dumps(merged.to_dict(), indent=2, sort_keys=True) + "\n")
    written = [f"{out.name}/gates.json"]
    print("slice    memorization  generalization  items")
    for s in merged.memorization:
        print(f"{s:<8} {merged.memorization[s]:>12.4f}  {merged.generalization[s]:>14.4f}  {merged.n_items[s]:>5}")
    if plots:
        from cdnrec.plotting import plot_gates

        plot_gates(merged, out / "gates.png")
        written.append(f"{out.name}/gates.png")
    return written


def cmd_gates(cfg: ExperimentConfig, args) -> int:
    data = load_data(cfg)
    run_dir = _run_dir(cfg)
    paths = _checkpoints(run_dir, args.checkpoint)
    out = run_dir / "gates"
    out.mkdir(exist_ok=True)
    try:
        written = _gates(cfg, data, paths, out, args.plots)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_manifest(run_dir, cfg, "gates", written)
    return 0


def cmd_export(cfg: ExperimentConfig, args) -> int:
    data = load_data(cfg)
    run_dir = _run_dir(cfg)
    path = _checkpoints(run_dir, args.checkpoint)[0]
    model, store, _ = load_trained(path, data)
    is_head = data.stats.is_head
    if args.items == "head":
        items = np.flatnonzero(is_head)
    elif args.items == "tail":
        items = np.flatnonzero(~is_head)
    else:
        items = np.arange(model.n_items)
    labels = [HEAD if is_head[i] else TAIL for i in items]
    out = Path(args.out) if args.out else run_dir / "embeddings.tsv"
    export_embeddings(model, store, items, labels, out, data.split.train.item_ids)
    _write_manifest(run_dir, cfg, "export-embeddings", [str(out)])
    print(f"wrote {len(items)} embeddings to {out}")
    return 0


def _parse_gammas(text: str) -> list[float]:
    try:
        gammas = [float(g) for g in text.split(",") if g.strip()]
    except ValueError:
        raise UsageError(f"--gammas must be a comma-separated list of numbers, got {text!r}") from None
    if not gammas:
        raise UsageError("--gammas is empty")
    bad = [g for g in gammas if not g > 1]
    if bad:
        raise UsageError(f"every gamma must exceed 1, got {bad}")
    return gammas


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    gammas = _parse_gammas(args.gammas)
    trials = args.trials or cfg.eval.trials
    data = load_data(cfg)
    run_dir = _run_dir(cfg)
    k = cfg.eval.ks[0]
    reports: dict[float, EvalReport] = {}
    for g in gammas:
        method = dataclasses.replace(cfg.method, name="cdn", gamma=g)
        reps = []
        for t in range(trials):
            train_cfg = dataclasses.replace(cfg.train, seed=cfg.train.seed + t)
            result = fit(
                method,
                train_cfg,
                data,
                item_config=cfg.model.item,
                user_config=cfg.model.user,
                run_dir=run_dir / f"gamma{g:g}" / f"trial{t}",
            )
            rep = evaluate(
                result.model, result.store, data.split.test, data.stats, (k,), (data.split.train, data.split.valid)
            )[k]
            reps.append(rep)
        reports[g] = aggregate(reps)
        print(f"gamma={g:g} NDCG@{k} overall={reports[g].metric('Overall', 'ndcg'):.3f}", flush=True)
    rows = report_rows({f"{g:g}": rep for g, rep in reports.items()})
    with open(run_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["gamma", "slice", "metric", "value", "sem"])
        writer.writeheader()
        for r in rows:
            writer.writerow({"gamma": r["label"], "slice": r["slice"], "metric": r["metric"], "value": r["value"], "sem": r["sem"]})
    (run_dir / "sweep.json").write_text(json.dumps({f"{g:g}": r.to_dict() for g, r in reports.items()}, indent=2) + "\n")
    written = ["sweep.csv", "sweep.json"]
    if args.plots:
        from cdnrec.plotting import plot_gamma_sweep

        plot_gamma_sweep(reports, run_dir / "sweep_ndcg.png")
        written.append("sweep_ndcg.png")
    _write_manifest(run_dir, cfg, "sweep-gamma", written)
    print(format_table({f"gamma={g:g}": r for g, r in reports.items()}), end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdnrec", description="Long-tail two-tower retrieval experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("config", help="experiment config (YAML)")
        sp.set_defaults(func=func)
        return sp

    add("prepare", cmd_prepare, "split the dataset and write the binary cache")

    sp = add("train", cmd_train, "train the configured method and report test metrics")
    sp.add_argument("--trials", type=int, help="independent seeded runs (default: eval.trials)")
    sp.add_argument("--resume", action="store_true", help="continue each trial from its last checkpoint")
    sp.add_argument("--plots", action="store_true", help="also render the training-loss figure")

    sp = add("evaluate", cmd_evaluate, "evaluate trained checkpoints")
    sp.add_argument("--checkpoint", help="one checkpoint instead of every trial under run_dir")
    sp.add_argument("--split", choices=("test", "valid"), default="test")
    sp.add_argument("--gates", action="store_true", help="include the gate analysis (CDN-style item towers)")
    sp.add_argument("--plots", action="store_true", help="render figures next to the reports")

    sp = add("gates", cmd_gates, "mean memorization/generalization gate weight per item slice")
    sp.add_argument("--checkpoint")
    sp.add_argument("--plots", action="store_true")

    sp = add("export-embeddings", cmd_export, "write main-branch item embeddings as TSV")
    sp.add_argument("--checkpoint")
    sp.add_argument("--items", choices=("all", "head", "tail"), default="all")
    sp.add_argument("--out", help="output path (default: <run_dir>/embeddings.tsv)")

    sp = add("sweep-gamma", cmd_sweep, "train one CDN per gamma and tabulate NDCG per slice")
    sp.add_argument("--gammas", default="1.01,2,4,8,16", help="comma-separated values, each > 1")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--plots", action="store_true")
    return p


def _category(exc: BaseException) -> str:
    if isinstance(exc, CDNError):
        return exc.category
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if getattr(args, "trials", None) is not None and args.trials < 1:
            raise UsageError("--trials must be at least 1")
        cfg = load_config(args.config)
        return args.func(cfg, args)
    except Exception as exc:  # reported as a machine-readable category
        category = _category(exc)
        if category == "internal":
            log.exception("unexpected failure")
        print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
