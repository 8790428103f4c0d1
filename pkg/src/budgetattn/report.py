"""Aggregate a run directory into cost-quality, latency and ranking tables."""

from __future__ import annotations

import json
import statistics
from pathlib import Path

from . import bench as B
from . import evaluation as E
from .checkpoint import load_checkpoint
from .config import parse_config
from .data import as_arrays


def _ms(xs: list[float]) -> dict:
    xs = [float(x) for x in xs]
    return {"mean": statistics.fmean(xs), "std": statistics.stdev(xs) if len(xs) > 1 else 0.0,
            "n": len(xs), "values": xs}


def _sweep_at(points: list[dict], kind: str, budget: float) -> dict:
    for p in points:
        if p["kind"] == kind and abs(p["budget"] - budget) < 1e-9:
            return p
    raise KeyError(f"no {kind} sweep point at B={budget}")


def _load_sweeps(root: Path, method: str, seeds) -> dict[int, dict]:
    out = {}
    for s in seeds:
        p = root / "sweep" / f"{method}_s{s}.json"
        if p.exists():
            out[s] = json.loads(p.read_text())
    return out


def cost_quality_table(root: Path) -> dict:
    """Rows of method, requested budget, cost and accuracy, as mean and std over seeds."""
    from .pipeline import RunLayout, build_data

    cfg = parse_config((root / "config.cfg").read_text())
    lay = RunLayout(root)
    seeds = cfg.seeds
    rows = []

    dense = [load_checkpoint(lay.dense(d, o)).best_val_accuracy
             for d in seeds for o in seeds if lay.dense(d, o).exists()]
    if dense:
        rows.append({"method": "dense", "budget": 1.0, "cost": _ms([1.0] * len(dense)),
                     "accuracy": _ms(dense), "cells": len(dense)})

    for method, label in (("budgeted", "budgeted_warm"), ("scratch", "budgeted_scratch")):
        sweeps = _load_sweeps(root, method, seeds)
        for b in (0.25, 0.50):
            pts = [_sweep_at(sw["points"], "soft", b) for sw in sweeps.values()]
            if pts:
                rows.append({"method": label, "kind": "soft", "budget": b, "seeds": sorted(sweeps),
                             "cost": _ms([p["cost"] for p in pts]), "accuracy": _ms([p["accuracy"] for p in pts])})

    data_cache = {}
    for b in cfg.run.static_budgets:
        accs, costs, used = [], [], []
        for s in seeds:
            path = lay.static(b, s)
            if not path.exists():
                continue
            data = data_cache.setdefault(s, build_data(cfg, s))
            acc, cost = E.evaluate(load_checkpoint(path), as_arrays(data.val), b, E.SOFT_KIND)
            accs.append(acc)
            costs.append(cost)
            used.append(s)
        if used:
            rows.append({"method": "static", "kind": "soft", "budget": b, "seeds": used,
                         "cost": _ms(costs), "accuracy": _ms(accs)})

    prunes = {s: json.loads(lay.prune(s).read_text()) for s in seeds if lay.prune(s).exists()}
    for b in cfg.run.prune_budgets:
        pts = [next(r for r in art["points"] if abs(r["budget"] - b) < 1e-9) for art in prunes.values()]
        if pts:
            rows.append({"method": "posthoc_prune", "kind": "hard_floored", "budget": b, "seeds": sorted(prunes),
                         "cost": _ms([p["cost"] for p in pts]), "accuracy": _ms([p["accuracy"] for p in pts])})

    for method, label in (("budgeted", "hard_unadapted"), ("adapted", "hard_adapted")):
        sweeps = _load_sweeps(root, method, seeds)
        for b in (0.25, 0.50, 0.75):
            pts = [_sweep_at(sw["points"], "hard", b) for sw in sweeps.values()]
            if pts:
                rows.append({"method": label, "kind": "hard", "budget": b, "seeds": sorted(sweeps),
                             "cost": _ms([p["cost"] for p in pts]), "accuracy": _ms([p["accuracy"] for p in pts])})
    return {"rows": rows, "config": (root / "config.cfg").read_text(), "seeds": list(seeds)}


def latency_table(root: Path) -> dict | None:
    cfg = parse_config((root / "config.cfg").read_text())
    reports = {}
    for variant in ("dense", "soft", "hard_skip"):
        found = {s: B.read_report(root / "bench" / f"s{s}_{variant}.json")
                 for s in cfg.seeds if (root / "bench" / f"s{s}_{variant}.json").exists()}
        if found:
            reports[variant] = found
    if "dense" not in reports:
        return None
    rows = []
    for variant, by_seed in reports.items():
        mean, std = B.speedup(reports["dense"], by_seed)
        rows.append({"variant": variant, "budget": next(iter(by_seed.values())).budget,
                     "median_ms": _ms([r.median_ms for r in by_seed.values()]),
                     "accuracy": _ms([r.accuracy for r in by_seed.values()]),
                     "speedup_mean": mean, "speedup_std": std,
                     "per_seed_ratio": {str(s): reports["dense"][s].median_ms / r.median_ms
                                        for s, r in sorted(by_seed.items())}})
    env = next(iter(reports["dense"].values())).environment
    return {"rows": rows, "environment": env, "config": (root / "config.cfg").read_text()}


def stability_table(root: Path) -> dict:
    cfg = parse_config((root / "config.cfg").read_text())
    per_seed = {str(s): sw["stability"] for s, sw in _load_sweeps(root, "budgeted", cfg.seeds).items()}
    rhos = [v["spearman"] for v in per_seed.values() if v["spearman"] is not None]
    return {"per_seed": per_seed, "spearman": _ms(rhos) if rhos else None,
            "retention": _ms([v["retention"] for v in per_seed.values()]) if per_seed else None,
            "budgets": list(cfg.run.stability_budgets), "ranked": "soft gate values"}


def _fmt(stat: dict, scale: float = 1.0, digits: int = 3) -> str:
    return E.format_pm(stat["mean"], stat["std"], scale, digits)


def markdown(cq: dict, lat: dict | None, stab: dict) -> str:
    lines = ["# Results", "", "## Cost and accuracy (validation, mean ± std over seeds)", "",
             "| method | eval | B | cost | accuracy (%) |", "|---|---|---|---|---|"]
    for r in cq["rows"]:
        lines.append(f"| {r['method']} | {r.get('kind', 'dense')} | {r['budget']:.2f} | {_fmt(r['cost'])} "
                     f"| {_fmt(r['accuracy'], 100, 1)} |")
    if lat:
        lines += ["", "## Single-thread latency", "",
                  "| variant | B | median ms | speedup vs dense | accuracy (%) |", "|---|---|---|---|---|"]
        for r in lat["rows"]:
            lines.append(f"| {r['variant']} | {r['budget']:.2f} | {_fmt(r['median_ms'], 1, 1)} "
                         f"| {r['speedup_mean']:.2f}±{r['speedup_std']:.2f} | {_fmt(r['accuracy'], 100, 1)} |")
        env = lat["environment"]
        lines += ["", f"CPU: {env.get('cpu')}; OS: {env.get('os')}; numpy {env.get('numpy')}"]
    lines += ["", "## Gate ranking across budgets", ""]
    b1, b2 = stab["budgets"]
    for s, v in stab["per_seed"].items():
        rho = "undefined" if v["spearman"] is None else f"{v['spearman']:.3f}"
        lines.append(f"- seed {s}: Spearman(B={b1}, B={b2}) = {rho}, top-k retention = {v['retention']:.3f}")
    return "\n".join(lines) + "\n"


def build_report(root: str | Path) -> list[str]:
    root = Path(root)
    if not (root / "config.cfg").exists():
        raise FileNotFoundError(f"{root} is not a run directory (config.cfg missing)")
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)
    cfg = parse_config((root / "config.cfg").read_text())
    written = []
    for method in ("budgeted", "scratch", "adapted"):
        sweeps = _load_sweeps(root, method, cfg.seeds)
        if sweeps:
            points = [p for sw in sweeps.values() for p in E.points_from_dicts(sw["points"])]
            E.pareto_report(points, out / f"pareto_{method}", method,
                            {"config": (root / "config.cfg").read_text(), "seeds": sorted(sweeps)})
            written += [str(out / f"pareto_{method}.csv"), str(out / f"pareto_{method}.json")]
    cq, lat, stab = cost_quality_table(root), latency_table(root), stability_table(root)
    tables = {"cost_quality.json": cq, "stability.json": stab}
    if lat is not None:
        tables["latency.json"] = lat
    for name, obj in tables.items():
        (out / name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        written.append(str(out / name))
    (out / "summary.md").write_text(markdown(cq, lat, stab))
    written.append(str(out / "summary.md"))
    return written
