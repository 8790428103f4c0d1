"""Command-line entry point: ``budgetattn <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench as B
from . import evaluation as E
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import ConfigError, dump_config, load_config
from .data import as_arrays
from .gating import InfeasibleBudgetError, write_gate_csv
from .pipeline import (RunLayout, StageError, build_data, data_from_meta, model_config_for, reproduce,
                       timed_split)
from .report import build_report
from .training import DivergenceError, adapt_hard, train_budgeted, train_dense, train_static

log = logging.getLogger("budgetattn")

EXIT_USAGE, EXIT_DIVERGED, EXIT_STAGE = 2, 3, 4


class CliError(Exception):
    pass


def _budget(text: str) -> float:
    b = float(text)
    if not 0.0 < b <= 1.0:
        raise argparse.ArgumentTypeError(f"budget must lie in (0, 1], got {text}")
    return b


def _load_ckpt(path: str):
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointFormatError as exc:
        raise CliError(f"unreadable checkpoint {path}: {exc}") from None


def _data_for(ckpt, cfg_path: str | None):
    """Data the checkpoint was trained on; with a config, also check the architecture echo."""
    if cfg_path is None:
        return data_from_meta(ckpt.meta)
    cfg = load_config(cfg_path)
    data = build_data(cfg, ckpt.meta.get("data_seed", cfg.seeds[0]))
    expected = model_config_for(cfg, data)
    if expected != ckpt.model_config:
        raise CliError(f"checkpoint model config {ckpt.model_config} is incompatible with {cfg_path} ({expected})")
    return data


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    data_seed = args.data_seed if args.data_seed is not None else seed
    lay = RunLayout(cfg.run.out_dir)
    data = build_data(cfg, data_seed)
    mcfg = model_config_for(cfg, data)
    warm = _load_ckpt(args.warm_start) if args.warm_start else None
    if args.mode == "dense":
        out = Path(args.out) if args.out else lay.dense(data_seed, seed)
        run = lambda: train_dense(mcfg, cfg.train_config("dense", seed), data, lay.log(out))
    elif args.mode == "budgeted":
        default = lay.budgeted(seed) if warm else lay.scratch(seed)
        out = Path(args.out) if args.out else default
        tc = cfg.train_config("budgeted" if warm else "scratch", seed)
        run = lambda: train_budgeted(mcfg, tc, data, warm, lay.log(out))
    elif args.mode == "static":
        budget = args.budget if args.budget is not None else cfg.run.static_budgets[0]
        out = Path(args.out) if args.out else lay.static(budget, seed)
        tc = cfg.train_config("static", seed, fixed_budget=budget)
        run = lambda: train_static(mcfg, tc, data, warm, lay.log(out))
    else:
        if warm is None:
            raise CliError("hard_adapt needs --warm-start pointing at a budgeted checkpoint")
        out = Path(args.out) if args.out else lay.adapted(seed)
        run = lambda: adapt_hard(cfg.train_config("hard_adapt", seed), warm, data, lay.log(out))
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt = run()
    ckpt.meta = {**ckpt.meta, "run_config": dump_config(cfg)}
    save_checkpoint(ckpt, out)
    print(f"{args.mode} seed={seed}: best val {ckpt.best_val_accuracy:.4f} at epoch {ckpt.epoch} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    if not ckpt.gated:
        raise CliError("sweep needs a gated checkpoint")
    data = _data_for(ckpt, args.config)
    budgets = E.parse_budget_range(args.budgets)
    seed = ckpt.meta.get("seed")
    points = E.budget_sweep(ckpt, as_arrays(data.part(args.split)), budgets, seed)
    out = Path(args.out or Path(args.ckpt).with_suffix("")).with_suffix("")
    out.parent.mkdir(parents=True, exist_ok=True)
    for kind in (E.SOFT_KIND, E.HARD_KIND):
        E.write_sweep_csv([p for p in points if p.kind == kind], f"{out}_{kind}.csv")
    meta = {"checkpoint": str(args.ckpt), "seed": seed, "split": args.split,
            "run_config": ckpt.meta.get("run_config"), "points": E.points_to_dicts(points)}
    Path(f"{out}_sweep.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}_soft.csv and {out}_hard.csv ({len(budgets)} budgets each)")
    return 0


def cmd_prune(args) -> int:
    dense = _load_ckpt(args.dense)
    data = _data_for(dense, args.config)
    model = dense.build_model()
    importance = E.score_heads(model, as_arrays(data.val))
    mask = E.prune_posthoc(importance, args.budget, floor=args.floor)
    acc, cost = E.evaluate(model, as_arrays(data.val), mask)
    out = Path(args.out or Path(args.dense).with_suffix(f".mask_b{args.budget:.2f}.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_gate_csv(mask.array, out)
    out.with_suffix(".json").write_text(json.dumps(
        {"budget": args.budget, "floor": args.floor, "active_heads": int(mask.array.sum()), "cost": cost,
         "accuracy": acc, "importance": importance.tolist(), "checkpoint": str(args.dense),
         "seed": dense.meta.get("seed"), "run_config": dense.meta.get("run_config")},
        indent=2, sort_keys=True) + "\n")
    print(f"{int(mask.array.sum())} heads kept, val accuracy {acc:.4f} -> {out}")
    return 0


def cmd_bench(args) -> int:
    dense = _load_ckpt(args.dense)
    gated = _load_ckpt(args.ckpt) if args.ckpt else None
    data = _data_for(dense, args.config)
    split = timed_split(data, args.examples)
    out = Path(args.out)
    seed = dense.meta.get("seed")
    kw = dict(warmup=args.warmup, repeats=args.repeats, batch_size=args.batch_size, seed=seed)
    variants = [("dense", dense, "dense", 1.0)]
    if gated is not None:
        variants += [("soft", gated, "soft", args.budget), ("hard_skip", gated, "hard_skip", args.budget)]
    results = {}
    for name, ck, mode, budget in variants:
        rep = B.measure_latency(ck, split, mode, budget, **kw)
        B.write_report(rep, out / f"s{seed}_{name}.json",
                       {"seed": seed, "run_config": ck.meta.get("run_config"), "checkpoint": str(
                           args.dense if name == "dense" else args.ckpt)})
        results[name] = rep
        print(f"{name:9s} B={budget:.2f} median {rep.median_ms:9.1f} ms  accuracy {rep.accuracy:.4f}")
    for name, rep in results.items():
        if name != "dense":
            print(f"{name} speedup vs dense: {results['dense'].median_ms / rep.median_ms:.3f}x")
    return 0


def cmd_report(args) -> int:
    for path in build_report(args.runs):
        print(path)
    return 0


def cmd_reproduce(args) -> int:
    cfg = load_config(args.config)
    root = reproduce(cfg, args.out, force=args.force, only=args.stages)
    print((root / "report" / "summary.md").read_text() if (root / "report" / "summary.md").exists() else root)
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="budgetattn", description="Budget-conditioned attention-head gating")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one checkpoint")
    t.add_argument("mode", choices=("dense", "budgeted", "static", "hard_adapt"))
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="optimization seed (default: first configured seed)")
    t.add_argument("--data-seed", type=int, help="data generation seed (default: --seed)")
    t.add_argument("--warm-start", help="dense checkpoint to start from; for hard_adapt, the budgeted teacher")
    t.add_argument("--budget", type=_budget, help="fixed budget for static gates")
    t.add_argument("--out", help="checkpoint path (default: inside the configured run directory)")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="soft and hard budget sweep of a gated checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--budgets", default="0.10:1.00:0.05", help="lo:hi:step")
    s.add_argument("--split", default="val", choices=("train", "val", "test"))
    s.add_argument("--config", help="check the checkpoint against this config and use its data settings")
    s.add_argument("--out", help="output prefix")
    s.set_defaults(fn=cmd_sweep)

    r = sub.add_parser("prune", help="post-hoc head pruning of a dense checkpoint")
    r.add_argument("--dense", required=True)
    r.add_argument("--budget", type=_budget, required=True)
    r.add_argument("--floor", action=argparse.BooleanOptionalAction, default=True,
                   help="keep at least one head per layer (default on)")
    r.add_argument("--config")
    r.add_argument("--out", help="mask CSV path")
    r.set_defaults(fn=cmd_prune)

    b = sub.add_parser("bench", help="single-thread latency of dense, soft and hard-skip inference")
    b.add_argument("--dense", required=True)
    b.add_argument("--ckpt", help="gated checkpoint for the soft and hard-skip variants")
    b.add_argument("--budget", type=_budget, default=0.5)
    b.add_argument("--examples", type=int, default=2000)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--batch-size", type=int, default=64)
    b.add_argument("--config")
    b.add_argument("--out", default="bench")
    b.set_defaults(fn=cmd_bench)

    rep = sub.add_parser("report", help="aggregate a run directory into tables")
    rep.add_argument("--runs", required=True)
    rep.set_defaults(fn=cmd_report)

    rp = sub.add_parser("reproduce", help="run the full ordered suite, resuming completed stages")
    rp.add_argument("--config", required=True)
    rp.add_argument("--out", help="run directory (default: run.out_dir from the config)")
    rp.add_argument("--force", action="store_true", help="reuse a directory whose manifest has another config")
    rp.add_argument("--stages", nargs="+", help="run only these stages")
    rp.set_defaults(fn=cmd_reproduce)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ConfigError, CliError, InfeasibleBudgetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
