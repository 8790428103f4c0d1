"""Ordered desk-scale reproduction driver with a resumable stage manifest.

Every stage writes its artifacts under one run directory. Checkpoint metadata
and JSON artifacts carry the serialized run config and the seeds that produced
them. A stage listed as complete in ``manifest.json`` is skipped on rerun.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bench as B
from . import evaluation as E
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, parse_config
from .data import DatasetSplit, as_arrays, load_text_csv, make_marked_split, MarkedTaskConfig
from .gating import write_gate_csv
from .model import ModelConfig
from .training import adapt_hard, train_budgeted, train_dense, train_static

log = logging.getLogger(__name__)

WORKERS_ENV = "BUDGETATTN_WORKERS"
STAGE_ORDER = ("dense", "budgeted", "scratch", "static", "prune", "hard_adapt", "sweep", "bench", "report")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage


# ------------------------------------------------------------------ data and provenance

def build_data(cfg: RunConfig, seed: int) -> DatasetSplit:
    if cfg.run.task == "marked":
        return make_marked_split(seed, cfg.data)
    d = cfg.data
    return load_text_csv(d.path, d.vocab_size, d.seq_len, d.n_val, d.test_path or None,
                         d.n_train or None, d.n_test or None, seed)


def data_from_meta(meta: dict) -> DatasetSplit:
    """Regenerate the split a checkpoint was trained on from its recorded config and seed."""
    dc, seed = meta.get("data_config"), meta.get("data_seed")
    if dc is None or seed is None:
        raise ValueError("checkpoint does not record its data config and seed")
    if "path" in dc:
        return load_text_csv(dc["path"], dc["vocab_size"], dc["seq_len"], dc["n_val"], dc["test_path"],
                             dc["n_train"], dc["n_test"], seed)
    known = {f.name for f in dataclasses.fields(MarkedTaskConfig)}
    return make_marked_split(seed, MarkedTaskConfig(**{k: v for k, v in dc.items() if k in known}))


def model_config_for(cfg: RunConfig, data: DatasetSplit) -> ModelConfig:
    """The configured architecture with vocabulary, length and class count taken from the data."""
    seq_len = len(data.train[0].tokens)
    return dataclasses.replace(cfg.model, vocab_size=data.vocab_size, seq_len=seq_len,
                               num_classes=data.num_classes)


def provenance(cfg: RunConfig, **seeds) -> dict:
    return {"config": dump_config(cfg), **seeds}


def _stamp(ckpt: Checkpoint, cfg: RunConfig) -> Checkpoint:
    ckpt.meta = {**ckpt.meta, "run_config": dump_config(cfg)}
    return ckpt


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _save(ckpt: Checkpoint, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(ckpt, tmp)
    os.replace(tmp, path)


def timed_split(data: DatasetSplit, n: int) -> tuple[np.ndarray, np.ndarray]:
    part = data.test if data.test else data.val
    tokens, labels = as_arrays(part)
    return tokens[:n], labels[:n]


# ------------------------------------------------------------------ paths

class RunLayout:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def dense(self, data_seed: int, opt_seed: int) -> Path:
        return self.root / "dense" / f"d{data_seed}_o{opt_seed}.ckpt"

    def budgeted(self, seed: int) -> Path:
        return self.root / "budgeted" / f"s{seed}.ckpt"

    def scratch(self, seed: int) -> Path:
        return self.root / "scratch" / f"s{seed}.ckpt"

    def static(self, budget: float, seed: int) -> Path:
        return self.root / "static" / f"b{budget:.2f}_s{seed}.ckpt"

    def prune(self, seed: int) -> Path:
        return self.root / "prune" / f"s{seed}.json"

    def adapted(self, seed: int) -> Path:
        return self.root / "hard_adapt" / f"s{seed}.ckpt"

    def sweep(self, method: str, seed: int) -> Path:
        return self.root / "sweep" / f"{method}_s{seed}.json"

    def bench(self, seed: int, variant: str) -> Path:
        return self.root / "bench" / f"s{seed}_{variant}.json"

    def log(self, ckpt: Path) -> Path:
        return ckpt.with_suffix(".log.jsonl")

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"


# ------------------------------------------------------------------ jobs (module level so they pickle)

def job_dense(cfg_text: str, root: str, data_seed: int, opt_seed: int) -> str:
    cfg, lay = parse_config(cfg_text), RunLayout(root)
    out = lay.dense(data_seed, opt_seed)
    if out.exists():
        return str(out)
    data = build_data(cfg, data_seed)
    ck = train_dense(model_config_for(cfg, data), cfg.train_config("dense", opt_seed), data, lay.log(out))
    _save(_stamp(ck, cfg), out)
    return str(out)


def job_budgeted(cfg_text: str, root: str, seed: int, warm: bool) -> str:
    cfg, lay = parse_config(cfg_text), RunLayout(root)
    out = lay.budgeted(seed) if warm else lay.scratch(seed)
    if out.exists():
        return str(out)
    data = build_data(cfg, seed)
    warm_ck = load_checkpoint(lay.dense(seed, seed)) if warm else None
    tc = cfg.train_config("budgeted" if warm else "scratch", seed)
    ck = train_budgeted(model_config_for(cfg, data), tc, data, warm_ck, lay.log(out))
    _save(_stamp(ck, cfg), out)
    return str(out)


def job_static(cfg_text: str, root: str, seed: int, budget: float) -> str:
    cfg, lay = parse_config(cfg_text), RunLayout(root)
    out = lay.static(budget, seed)
    if out.exists():
        return str(out)
    data = build_data(cfg, seed)
    tc = cfg.train_config("static", seed, fixed_budget=budget)
    ck = train_static(model_config_for(cfg, data), tc, data, load_checkpoint(lay.dense(seed, seed)), lay.log(out))
    _save(_stamp(ck, cfg), out)
    return str(out)


def prune_artifact(cfg: RunConfig, dense: Checkpoint, data: DatasetSplit, budgets, seed: int) -> dict:
    model = dense.build_model()
    val = as_arrays(data.val)
    importance = E.score_heads(model, val)
    rows = []
    for b in budgets:
        mask = E.prune_posthoc(importance, b, floor=True)
        acc, cost = E.evaluate(model, val, mask)
        rows.append({"budget": b, "cost": cost, "accuracy": acc, "mask": mask.array.tolist()})
    return {"importance": importance.tolist(), "points": rows, **provenance(cfg, seed=seed, data_seed=seed)}


def job_prune(cfg_text: str, root: str, seed: int) -> str:
    cfg, lay = parse_config(cfg_text), RunLayout(root)
    out = lay.prune(seed)
    if out.exists():
        return str(out)
    data = build_data(cfg, seed)
    art = prune_artifact(cfg, load_checkpoint(lay.dense(seed, seed)), data, cfg.run.prune_budgets, seed)
    _write_json(out, art)
    for row in art["points"]:
        write_gate_csv(np.array(row["mask"]), out.with_name(f"s{seed}_mask_b{row['budget']:.2f}.csv"))
    return str(out)


def job_adapt(cfg_text: str, root: str, seed: int) -> str:
    cfg, lay = parse_config(cfg_text), RunLayout(root)
    out = lay.adapted(seed)
    if out.exists():
        return str(out)
    data = build_data(cfg, seed)
    ck = adapt_hard(cfg.train_config("hard_adapt", seed), load_checkpoint(lay.budgeted(seed)), data, lay.log(out))
    _save(_stamp(ck, cfg), out)
    return str(out)


def sweep_artifact(cfg: RunConfig, ckpt: Checkpoint, data: DatasetSplit, seed: int, method: str) -> dict:
    budgets = E.parse_budget_range(cfg.run.sweep)
    points = E.budget_sweep(ckpt, as_arrays(data.val), budgets, seed)
    b1, b2 = cfg.run.stability_budgets
    rs = E.gate_rank_stability(ckpt, b1, b2)
    return {"method": method, "points": E.points_to_dicts(points),
            "stability": {"spearman": rs.spearman, "retention": rs.retention, "budgets": list(rs.budgets),
                          "note": rs.note},
            **provenance(cfg, seed=seed, data_seed=seed)}


def job_sweep(cfg_text: str, root: str, seed: int, method: str) -> str:
    cfg, lay = parse_config(cfg_text), RunLayout(root)
    out = lay.sweep(method, seed)
    if out.exists():
        return str(out)
    src = {"budgeted": lay.budgeted, "scratch": lay.scratch, "adapted": lay.adapted}[method](seed)
    art = sweep_artifact(cfg, load_checkpoint(src), build_data(cfg, seed), seed, method)
    _write_json(out, art)
    E.write_sweep_csv(E.points_from_dicts(art["points"]), out.with_suffix(".csv"))
    return str(out)


def bench_seed(cfg: RunConfig, lay: RunLayout, seed: int) -> list[str]:
    """Dense, soft-gated and hard-skip latency for one seed, strictly sequential."""
    data = build_data(cfg, seed)
    split = timed_split(data, cfg.run.bench_examples)
    r = cfg.run
    kw = dict(warmup=r.bench_warmup, repeats=r.bench_repeats, batch_size=r.bench_batch_size, seed=seed)
    variants = [("dense", lay.dense(seed, seed), "dense", 1.0),
                ("soft", lay.budgeted(seed), "soft", r.bench_budget),
                ("hard_skip", lay.budgeted(seed), "hard_skip", r.bench_budget)]
    written = []
    for name, path, mode, budget in variants:
        out = lay.bench(seed, name)
        if not out.exists():
            rep = B.measure_latency(load_checkpoint(path), split, mode, budget, **kw)
            B.write_report(rep, out, {**provenance(cfg, seed=seed, data_seed=seed), "checkpoint": str(path)})
        written.append(str(out))
    return written


# ------------------------------------------------------------------ manifest and driver

def worker_count(n_jobs: int) -> int:
    raw = os.environ.get(WORKERS_ENV)
    cap = int(raw) if raw else (os.cpu_count() or 1)
    if cap < 1:
        raise ValueError(f"{WORKERS_ENV} must be a positive integer")
    return max(1, min(cap, n_jobs))


def run_jobs(fn, arg_list: list[tuple]) -> list:
    n = worker_count(len(arg_list))
    if n == 1:
        return [fn(*a) for a in arg_list]
    with ProcessPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(fn, *a) for a in arg_list]
        return [f.result() for f in futures]


def config_digest(cfg_text: str) -> str:
    return hashlib.sha256(cfg_text.encode()).hexdigest()[:16]


def read_manifest(lay: RunLayout) -> dict:
    if lay.manifest.exists():
        return json.loads(lay.manifest.read_text())
    return {}


def stage_jobs(cfg: RunConfig, text: str, root: str):
    seeds = cfg.seeds
    return {
        "dense": (job_dense, [(text, root, d, o) for d in seeds for o in seeds]),
        "budgeted": (job_budgeted, [(text, root, s, True) for s in seeds]),
        "scratch": (job_budgeted, [(text, root, s, False) for s in seeds]),
        "static": (job_static, [(text, root, s, b) for b in cfg.run.static_budgets for s in seeds]),
        "prune": (job_prune, [(text, root, s) for s in seeds]),
        "hard_adapt": (job_adapt, [(text, root, s) for s in seeds]),
        "sweep": (job_sweep, [(text, root, s, m) for m in ("budgeted", "scratch", "adapted") for s in seeds]),
    }


def reproduce(cfg: RunConfig, out_dir: str | Path | None = None, force: bool = False,
              only: list[str] | None = None) -> Path:
    """Run every stage in order, skipping those the manifest marks complete."""
    from .report import build_report

    lay = RunLayout(out_dir or cfg.run.out_dir)
    lay.root.mkdir(parents=True, exist_ok=True)
    text = dump_config(cfg)
    digest = config_digest(text)
    manifest = read_manifest(lay)
    if manifest and manifest.get("config_digest") != digest and not force:
        raise ValueError(f"{lay.root} holds a run with a different config; use --force or a new directory")
    if not manifest or manifest.get("config_digest") != digest:
        manifest = {"config_digest": digest, "stages": {}}
    (lay.root / "config.cfg").write_text(text)
    jobs = stage_jobs(cfg, text, str(lay.root))
    for stage in STAGE_ORDER:
        if only and stage not in only:
            continue
        if manifest["stages"].get(stage, {}).get("status") == "done":
            log.info("stage %s already complete, skipping", stage)
            continue
        log.info("stage %s starting", stage)
        t0 = time.perf_counter()
        try:
            if stage == "bench":
                artifacts = [p for s in cfg.seeds for p in bench_seed(cfg, lay, s)]
            elif stage == "report":
                artifacts = build_report(lay.root)
            else:
                fn, args = jobs[stage]
                artifacts = run_jobs(fn, args)
        except Exception as exc:
            manifest["stages"][stage] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            _write_json(lay.manifest, manifest)
            raise StageError(stage, exc) from exc
        manifest["stages"][stage] = {"status": "done", "seconds": round(time.perf_counter() - t0, 3),
                                     "artifacts": [str(Path(a).relative_to(lay.root)) for a in artifacts]}
        _write_json(lay.manifest, manifest)
    return lay.root
