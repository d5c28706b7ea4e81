"""Command-line entry point: ``python -m dmada <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .evaluation import branch_ablation_spec, export_embeddings, mixup_ablation_spec, run_ablation
from .networks import CheckpointError, ModelSet, load_checkpoint
from .plots import plot_run, plot_sensitivity
from .tensor import NumericError
from .trainer import ConfigError, RunConfig, dump_config, evaluate_epoch, load_config, read_metrics, train

OUTPUT_ROOT_ENV = "DMADA_OUTPUT_ROOT"
TASKS = ("moons", "digits-invert", "digits-rotate")
FILES = {
    "source_images": "source-images.idx",
    "source_labels": "source-labels.idx",
    "target_images": "target-images.idx",
    "target_labels": "target-labels.idx",
}

log = logging.getLogger("dmada")


class CliError(Exception):
    pass


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# -- data ----------------------------------------------------------------

def build_pair(task: str, seed: int, n: int = 2000, shift: float = 30.0, noise: float = 0.1) -> D.DomainPair:
    rng = np.random.default_rng(seed)
    if task == "moons":
        return D.make_moons_pair(n, noise, shift, rng)
    if task in ("digits-invert", "digits-rotate"):
        return D.digits_pair(task.split("-", 1)[1], rng)
    raise CliError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")


def write_pair(pair: D.DomainPair, out: Path, manifest: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    D.save_idx(pair.source, out / FILES["source_images"], out / FILES["source_labels"])
    D.save_idx(pair.target, out / FILES["target_images"], out / FILES["target_labels"])
    manifest = dict(
        manifest,
        n_classes=pair.n_classes,
        image_shape=list(pair.source.image_shape),
        sizes={"source": len(pair.source), "target": len(pair.target)},
        files=FILES,
    )
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_pair(location: str) -> D.DomainPair:
    """A ``gen-data`` directory, or a built-in task name generated with seed 0."""
    if not location:
        raise CliError("no dataset configured; set data=<gen-data directory or task name>")
    if location in TASKS:
        return build_pair(location, seed=0)
    root = Path(location)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise CliError(f"{location}: not a task name and no manifest.json found")
    manifest = json.loads(manifest_path.read_text())
    files, k = manifest["files"], manifest["n_classes"]
    src = D.load_idx(root / files["source_images"], root / files["source_labels"], "source", k)
    tgt = D.load_idx(root / files["target_images"], root / files["target_labels"], "target", k)
    return D.DomainPair(src, tgt)


def _resolved(cfg: RunConfig) -> RunConfig:
    if cfg.data and cfg.data not in TASKS:
        return cfg.replace(data=str(Path(cfg.data).resolve()))
    return cfg


# -- commands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.task == "moons" and abs(args.shift) > D.MAX_MOONS_SHIFT:
        raise CliError(f"--shift {args.shift:g} outside [-{D.MAX_MOONS_SHIFT:g}, {D.MAX_MOONS_SHIFT:g}]")
    pair = build_pair(args.task, args.seed, args.n, args.shift, args.noise)
    out = Path(args.out) if args.out else _output_root() / "data" / f"{args.task}-seed{args.seed}"
    meta = {"task": args.task, "seed": args.seed}
    if args.task == "moons":
        meta.update(transform=f"rotate({args.shift:g})", shift=args.shift, noise=args.noise, n=args.n)
    elif args.task == "digits-invert":
        meta.update(transform="invert")
    else:
        meta.update(transform="upsample(2)+rotate(25)+gaussian_noise(0.05)")
    path = write_pair(pair, out, meta)
    print(path.parent)
    return 0


def cmd_train(args) -> int:
    cfg = _resolved(load_config(args.config, args.set))
    pair = read_pair(cfg.data)
    name = Path(args.config).stem if args.config else "run"
    run_dir = Path(args.out) if args.out else _output_root() / f"{name}-seed{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.ini")
    _, records = train(pair, cfg, run_dir=run_dir)
    best = max(records, key=lambda r: r.target_accuracy)
    summary = {
        "epochs": len(records),
        "final_accuracy": records[-1].target_accuracy,
        "best_accuracy": best.target_accuracy,
        "best_epoch": best.epoch,
        "final_a_distance": records[-1].a_distance,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(run_dir)
    return 0


def restore_run(run_dir: Path):
    """Config, data and trained models of a finished run directory."""
    cfg = load_config(run_dir / "config.ini")
    pair = read_pair(cfg.data)
    models = ModelSet(cfg.architecture(pair.dim, pair.n_classes), np.random.default_rng(0), cfg.learning_rate)
    models.load_state_dict(load_checkpoint(run_dir / "checkpoint.bin"))
    return cfg, pair, models


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    cfg, pair, models = restore_run(run_dir)
    acc, d_a = evaluate_epoch(models, pair.training_view(), pair.target, cfg.a_distance_samples,
                              seed=cfg.seed * 100003 + cfg.epochs - 1)
    result = {"target_accuracy": acc, "a_distance": d_a}
    metrics = run_dir / "metrics.csv"
    if metrics.exists():
        logged = read_metrics(metrics)[-1]
        result["logged_accuracy"] = logged.target_accuracy
        result["matches_log"] = logged.target_accuracy == acc
    print(json.dumps(result))
    return 0


def cmd_export(args) -> int:
    _, pair, models = restore_run(Path(args.run))
    out = Path(args.out) if args.out else Path(args.run) / "embeddings.csv"
    export_embeddings(models, {"source": pair.source, "target": pair.target}, out)
    print(out)
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolved(load_config(args.config, args.set))
    pair = read_pair(cfg.data)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    make = {"mixup": mixup_ablation_spec, "branches": branch_ablation_spec}[args.grid]
    spec = make(seeds, task=cfg.data or "unnamed")
    out = Path(args.out) if args.out else _output_root() / f"ablation-{args.grid}"
    rows = run_ablation(spec, cfg, lambda seed: (pair, pair.target), out_dir=out, workers=args.workers)
    for r in rows:
        print(f"{r.combination:28s} acc {r.mean_accuracy:.4f} +- {r.std_accuracy:.4f}  d_A {r.mean_a_distance:.3f}")
    print(out)
    return 0


def cmd_plot(args) -> int:
    runs = [Path(r) for r in args.runs]
    if args.sensitivity:
        grouped: dict[str, list] = {args.sensitivity: []}
        for run in runs:
            cfg = load_config(run / "config.ini")
            grouped[args.sensitivity].append((getattr(cfg, args.sensitivity), read_metrics(run / "metrics.csv")))
        out = Path(args.out) if args.out else runs[0].parent
        out.mkdir(parents=True, exist_ok=True)
        print(plot_sensitivity(grouped, out / f"sensitivity-{args.sensitivity}.svg"))
        return 0
    for run in runs:
        out = Path(args.out) / run.name if args.out and len(runs) > 1 else Path(args.out or run)
        out.mkdir(parents=True, exist_ok=True)
        for p in plot_run(run, out):
            print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmada", description="Domain-mixup adversarial adaptation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable; KEY or section.KEY)")
        sp.add_argument("--out", help=f"output directory (default under ${OUTPUT_ROOT_ENV} or ./runs)")

    g = sub.add_parser("gen-data", help="write a source/target pair as IDX files plus manifest.json")
    g.add_argument("--task", choices=TASKS, default="moons")
    g.add_argument("--shift", type=float, default=30.0, help="moons rotation in degrees, |shift| <= 45")
    g.add_argument("--n", type=int, default=2000, help="moons samples per domain")
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train and write a run directory")
    with_config(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="re-evaluate a run directory from its checkpoint and config snapshot")
    e.add_argument("run")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run a toggle ablation grid")
    with_config(a)
    a.add_argument("--grid", choices=("mixup", "branches"), default="mixup",
                   help="mixup: mixup/triplet rows; branches: class branch and pseudo-label rows")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-embeddings", help="write [mu, sigma] features of both domains as CSV")
    x.add_argument("run")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export)

    pl = sub.add_parser("plot", help="SVG loss/accuracy curves, or a sensitivity sweep over runs")
    pl.add_argument("runs", nargs="+")
    pl.add_argument("--sensitivity", choices=("omega", "phi", "alpha", "learning_rate"))
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, D.IdxError, CheckpointError, NumericError, ValueError, OSError, KeyError) as exc:
        print(f"dmada {args.command}: error: {exc}", file=sys.stderr)
        return 2

