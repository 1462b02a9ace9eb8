"""Command-line entry point.

Exit status: 0 on success, 1 on usage errors (bad flags, bad config file,
bad GTTA_LOG), 2 when a run fails.  Every random draw derives from --seed:
it seeds the generated benchmark and is the first of the model seeds.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from gtta.config import ExperimentConfig, load_config
from gtta.errors import ConfigParseError, GttaError, UsageError
from gtta.grt import heatmap_csv, heatmap_pgm, load_model, region_attribution, save_model
from gtta.harness import (
    ABLATION_CELLS,
    METHODS,
    EvalResult,
    FeatureCache,
    GridResult,
    accuracy,
    make_adapter,
    model_digest,
    roc_auc,
    run_ablation,
    run_comparison,
    train_source,
    write_report,
)
from gtta.synthdata import default_benchmark, disc_patch_mask, load_benchmark, save_benchmark
from gtta.tpd import save_snapshot

log = logging.getLogger("gtta")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _flags(p, *names):
    add = {
        "config": lambda: p.add_argument("--config", type=Path, help="TOML config; flags override its values"),
        "seed": lambda: p.add_argument("--seed", type=int, help="benchmark seed and first model seed (default 0)"),
        "seeds": lambda: p.add_argument("--seeds", type=int, help="number of consecutive model seeds (default 5)"),
        "jobs": lambda: p.add_argument("--jobs", type=int, default=1, help="parallel seed workers (default 1)"),
        "data": lambda: p.add_argument("--data", type=Path, help="benchmark directory from gen-data; generated in memory if omitted"),
        "checkpoint": lambda: p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint from train"),
        "method": lambda: p.add_argument("--method", default="none", choices=METHODS, help="test-time method (default none)"),
        "methods": lambda: p.add_argument("--method", action="append", choices=METHODS, help="restrict to these methods (repeatable)"),
        "epochs": lambda: p.add_argument("--epochs", type=int, help="source training epochs"),
        "no-grt": lambda: p.add_argument("--no-grt", action="store_true", help="train without the graph head"),
        "steps-per-batch": lambda: p.add_argument("--steps-per-batch", type=int, help="TPD optimiser steps per test batch"),
        "capacity": lambda: p.add_argument("--capacity", type=int, help="TPD memory-bank capacity per class"),
        "tau-proto": lambda: p.add_argument("--tau-proto", type=float, help="prototype softmax temperature"),
        "tau-epd": lambda: p.add_argument("--tau-epd", type=float, help="entropy-weight temperature"),
        "count": lambda: p.add_argument("--count", type=int, default=100, help="images to attribute (default 100)"),
        "domain": lambda: p.add_argument("--domain", help="target domain name (default: the first target)"),
    }
    for name in names:
        add[name]()


TPD_FLAGS = ("steps-per-batch", "capacity", "tau-proto", "tau-epd")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gtta", description="Graph-guided test-time adaptation on a synthetic fundus benchmark.",
                     epilog="Environment: GTTA_LOG=error|info|debug sets log verbosity (default error).")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write the source and target domain files")
    _flags(p, "config", "seed")
    p.add_argument("--out", type=Path, default=Path("data"), help="output directory (default data/)")

    p = sub.add_parser("train", help="train one source model and save its checkpoint")
    _flags(p, "config", "seed", "data", "epochs", "no-grt")
    p.add_argument("--out", type=Path, default=Path("model.json"), help="checkpoint path (default model.json)")

    p = sub.add_parser("adapt", help="adapt a checkpoint on every target stream, write predictions")
    _flags(p, "config", "seed", "data", "checkpoint", "method", *TPD_FLAGS)
    p.add_argument("--out", type=Path, default=Path("adapt"), help="output directory (default adapt/)")

    p = sub.add_parser("eval", help="print per-domain ACC/AUC of a checkpoint under one method")
    _flags(p, "config", "seed", "data", "checkpoint", "method", *TPD_FLAGS)
    p.add_argument("--out", type=Path, help="also write the metrics JSON here")

    p = sub.add_parser("ablate", help="GRT x TPD grid over seeds")
    _flags(p, "config", "seed", "seeds", "jobs", "data", "epochs", *TPD_FLAGS)
    p.add_argument("--out", type=Path, default=Path("results"), help="report directory (default results/)")

    p = sub.add_parser("compare", help="test-time methods from a shared GRT checkpoint, over seeds")
    _flags(p, "config", "seed", "seeds", "jobs", "data", "epochs", "methods", *TPD_FLAGS)
    p.add_argument("--out", type=Path, default=Path("results"), help="report directory (default results/)")

    p = sub.add_parser("attribute", help="region attribution heatmaps (CSV + PGM) for target images")
    _flags(p, "config", "seed", "data", "checkpoint", "count", "domain")
    p.add_argument("--out", type=Path, default=Path("attribution"), help="output directory (default attribution/)")

    p = sub.add_parser("report", help="rebuild tables from the per-run JSON logs of a results directory")
    p.add_argument("--out", type=Path, default=Path("results"), help="results directory (default results/)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    """Config file first, then flags on top."""
    path = getattr(args, "config", None)
    cfg = load_config(path) if path else ExperimentConfig()
    train, tpd = {}, {}
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    if getattr(args, "no_grt", False):
        train["grt_enabled"] = False
    for flag, key in (("steps_per_batch", "steps_per_batch"), ("capacity", "capacity"),
                      ("tau_proto", "tau_proto"), ("tau_epd", "tau_epd")):
        if getattr(args, flag, None) is not None:
            tpd[key] = getattr(args, flag)
    top = {}
    if getattr(args, "seed", None) is not None:
        top["seed"] = args.seed
    if getattr(args, "seeds", None) is not None:
        top["seeds"] = args.seeds
    try:
        return dataclasses.replace(
            cfg,
            train=dataclasses.replace(cfg.train, **train),
            tpd=dataclasses.replace(cfg.tpd, **tpd),
            **top,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _positive(name, value):
    if value is not None and value < 1:
        raise UsageError(f"--{name} must be >= 1")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _benchmark(args, cfg):
    if args.data is not None:
        return load_benchmark(args.data)
    return default_benchmark(cfg.seed)


def _emit(doc, out: Path | None = None):
    text = json.dumps(doc, indent=1, sort_keys=True)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    print(text)


def cmd_gen_data(args, cfg):
    source, targets = default_benchmark(cfg.seed)
    paths = save_benchmark(source, targets, args.out)
    _emit({"written": [str(p) for p in paths], "digests": {d.name: d.digest() for d in [source, *targets]}})


def cmd_train(args, cfg):
    source, _ = _benchmark(args, cfg)
    model = train_source(cfg, source, cfg.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out)
    _emit({"checkpoint": str(args.out), "grt": model.grt_enabled, "digest": model_digest(model),
           "loss_trace": [round(v, 6) for v in model.trace]})


def _adapt_domains(args, cfg, write: bool):
    _, targets = _benchmark(args, cfg)
    model = load_model(args.checkpoint, cfg.model)
    cache = FeatureCache()
    out = {}
    for ds in targets:
        Z = cache.get(model, ds)
        adapter = make_adapter(args.method, model, cfg, cfg.seed)
        probs = np.concatenate([adapter.process(Z[i:i + cfg.tpd.batch]) for i in range(0, len(Z), cfg.tpd.batch)])
        y = ds.labels
        out[ds.name] = {"acc": accuracy(np.argmax(probs, axis=1), y), "auc": roc_auc(probs[:, 1], y)}
        if write:
            rows = "".join(f"{i},{y[i]},{probs[i, 1]:.8f}\n" for i in range(len(y)))
            (args.out / f"{ds.name}.predictions.csv").write_text("index,label,p_glaucoma\n" + rows)
            if args.method == "tpd":
                save_snapshot(adapter.state, args.out / f"{ds.name}.tpd.json", args.out / f"{ds.name}.bank.json")
    return EvalResult(out)


def cmd_adapt(args, cfg):
    args.out.mkdir(parents=True, exist_ok=True)
    res = _adapt_domains(args, cfg, write=True)
    _emit({"method": args.method, **res.to_dict()}, args.out / "metrics.json")


def cmd_eval(args, cfg):
    res = _adapt_domains(args, cfg, write=False)
    _emit({"method": args.method, **res.to_dict()}, args.out)


def _seeds(cfg):
    return list(range(cfg.seed, cfg.seed + cfg.seeds))


def cmd_ablate(args, cfg):
    _positive("seeds", cfg.seeds)
    _positive("jobs", args.jobs)
    grid = run_ablation(_benchmark(args, cfg), _seeds(cfg), cfg, jobs=args.jobs)
    paths = write_report(grid, args.out)
    _emit({"written": [str(p) for p in paths], "mean_avg_acc": {k: grid.mean_avg_acc(k) for k in grid.rows}})


def cmd_compare(args, cfg):
    _positive("seeds", cfg.seeds)
    _positive("jobs", args.jobs)
    methods = tuple(m for m in METHODS if m in (args.method or METHODS))
    grid = run_comparison(_benchmark(args, cfg), _seeds(cfg), cfg, methods=methods, jobs=args.jobs)
    paths = write_report(grid, args.out)
    _emit({"written": [str(p) for p in paths], "mean_avg_acc": {k: grid.mean_avg_acc(k) for k in grid.rows}})


def cmd_attribute(args, cfg):
    _positive("count", args.count)
    _, targets = _benchmark(args, cfg)
    by_name = {t.name: t for t in targets}
    name = args.domain or targets[0].name
    if name not in by_name:
        raise UsageError(f"unknown domain {name!r}; choose from {', '.join(by_name)}")
    model = load_model(args.checkpoint, cfg.model)
    args.out.mkdir(parents=True, exist_ok=True)
    masses = []
    for i, s in enumerate(by_name[name].samples[:args.count]):
        heat = region_attribution(model, s.image)
        masses.append(float(heat[disc_patch_mask(s, model.cfg.patch)].sum()))
        (args.out / f"{name}_{i:04d}.csv").write_text(heatmap_csv(heat))
        (args.out / f"{name}_{i:04d}.pgm").write_text(heatmap_pgm(heat, scale=8))
    _emit({"domain": name, "images": len(masses), "grt": model.grt_enabled,
           "mean_disc_mass": float(np.mean(masses))}, args.out / "summary.json")


_RUN_NAME = re.compile(r"^(ablation|comparison)_(.+)_seed(-?\d+)\.json$")


def cmd_report(args, cfg):
    runs = args.out / "runs"
    found = {}
    for path in sorted(runs.glob("*.json")) if runs.is_dir() else []:
        m = _RUN_NAME.match(path.name)
        if m:
            kind, label, seed = m.group(1), m.group(2), int(m.group(3))
            doc = json.loads(path.read_text())
            found.setdefault(kind, {}).setdefault(label, {})[seed] = EvalResult(doc["domains"])
    if not found:
        raise GttaError(f"no run logs under {runs}")
    written = []
    for kind, rows in found.items():
        canon = [c[0] for c in ABLATION_CELLS] if kind == "ablation" else list(METHODS)
        order = [l for l in canon if l in rows] + sorted(l for l in rows if l not in canon)
        seeds = sorted(set.intersection(*(set(r) for r in rows.values())))
        grid = GridResult(kind, {l: rows[l] for l in order}, seeds)
        written += write_report(grid, args.out)
    _emit({"written": [str(p) for p in written]})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
    "attribute": cmd_attribute,
    "report": cmd_report,
}


def _setup_logging():
    level = os.environ.get("GTTA_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"GTTA_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (GttaError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
