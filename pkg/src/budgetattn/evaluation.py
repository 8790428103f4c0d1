"""Budget sweeps, hard-mask evaluation, post-hoc head pruning and reporting."""

from __future__ import annotations

import csv
import json
import math
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import tensor as T
from .checkpoint import Checkpoint
from .data import Example, as_arrays
from .gating import (HARD_FLOORED, HARD_GLOBAL, HeadMask, estimated_cost, hard_mask_for_budget,
                     head_count, select_top_k, soft_gates)
from .model import EncoderModel

SOFT_KIND = "soft"
HARD_KIND = "hard"
CANONICAL_BUDGETS = (0.25, 0.50, 0.75, 1.00)


class MonotonicityError(AssertionError):
    """Soft cost decreased between two increasing requested budgets."""


@dataclass
class SweepPoint:
    budget: float
    cost: float
    accuracy: float
    kind: str
    seed: int | None = None


def sweep_budgets(lo: float = 0.10, hi: float = 1.00, step: float = 0.05) -> list[float]:
    if not (0.0 < lo <= hi <= 1.0 and step > 0):
        raise ValueError(f"need 0 < lo <= hi <= 1 and step > 0, got {lo}:{hi}:{step}")
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


def parse_budget_range(text: str) -> list[float]:
    """``'0.10:1.00:0.05'`` -> the 19 budgets; a comma list is taken literally."""
    if ":" in text:
        lo, hi, step = (float(x) for x in text.split(":"))
        return sweep_budgets(lo, hi, step)
    return [float(x) for x in text.split(",") if x.strip()]


def _as_model(ckpt: Checkpoint | EncoderModel) -> EncoderModel:
    return ckpt if isinstance(ckpt, EncoderModel) else ckpt.build_model()


def predict_logits(model: EncoderModel, tokens: np.ndarray, mask: HeadMask | None = None,
                   batch_size: int = 256) -> np.ndarray:
    """Inference logits in batches; ``mask=None`` runs the dense path."""
    out = [model.infer_logits(tokens[i:i + batch_size], mask) for i in range(0, len(tokens), batch_size)]
    return np.concatenate(out)


def accuracy_of(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def mean_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(T.cross_entropy(logits, labels).item())


def budget_mask(model: EncoderModel, budget: float, kind: str, floor: bool = False) -> HeadMask:
    if model.gate_params is None:
        raise ValueError("checkpoint has no gate parameters; budgets need a gated model")
    if kind == SOFT_KIND:
        return soft_gates(model.gate_params, budget)
    if kind == HARD_KIND:
        return hard_mask_for_budget(model.gate_params, budget, floor)
    raise ValueError(f"unknown eval kind {kind!r}")


def evaluate(ckpt: Checkpoint | EncoderModel, split: list[Example] | tuple,
             mask_or_budget: HeadMask | float | None = None, kind: str = SOFT_KIND,
             floor: bool = False) -> tuple[float, float]:
    """(accuracy, cost). Soft cost is the mean gate; hard cost is exactly k / (L * H)."""
    model = _as_model(ckpt)
    tokens, labels = split if isinstance(split, tuple) else as_arrays(split)
    if len(tokens) == 0:
        raise ValueError("empty split")
    if mask_or_budget is None:
        mask = None
        cost = 1.0
    elif isinstance(mask_or_budget, HeadMask):
        mask = mask_or_budget
        cost = float(estimated_cost(mask).item())
    else:
        mask = budget_mask(model, float(mask_or_budget), kind, floor)
        if kind == HARD_KIND:
            c = model.config
            cost = head_count(float(mask_or_budget), c.layers, c.heads) / (c.layers * c.heads)
        else:
            cost = float(estimated_cost(mask).item())
    return accuracy_of(predict_logits(model, tokens, mask), labels), cost


def check_monotone(points: list[SweepPoint]) -> None:
    for prev, cur in zip(points, points[1:]):
        if cur.cost < prev.cost:
            raise MonotonicityError(
                f"soft cost fell from {prev.cost:.6f} at B={prev.budget} to {cur.cost:.6f} at B={cur.budget}")


def budget_sweep(ckpt: Checkpoint | EncoderModel, split, budgets=None,
                 seed: int | None = None) -> list[SweepPoint]:
    """One soft and one hard point per budget, soft first; raises on non-monotone soft cost."""
    budgets = list(sweep_budgets() if budgets is None else budgets)
    if budgets != sorted(budgets):
        raise ValueError("budgets must be sorted ascending")
    model = _as_model(ckpt)
    data = split if isinstance(split, tuple) else as_arrays(split)
    soft = [SweepPoint(b, *_swap(evaluate(model, data, b, SOFT_KIND)), SOFT_KIND, seed) for b in budgets]
    check_monotone(soft)
    hard = [SweepPoint(b, *_swap(evaluate(model, data, b, HARD_KIND)), HARD_KIND, seed) for b in budgets]
    return soft + hard


def _swap(acc_cost: tuple[float, float]) -> tuple[float, float]:
    acc, cost = acc_cost
    return cost, acc


# ------------------------------------------------------------------ head importance

def score_heads(dense: Checkpoint | EncoderModel, val_split) -> np.ndarray:
    """Validation-loss increase from zeroing each head alone (L*H + 1 full passes)."""
    model = _as_model(dense)
    tokens, labels = val_split if isinstance(val_split, tuple) else as_arrays(val_split)
    c = model.config
    base = mean_loss(predict_logits(model, tokens, HeadMask.ones(c.layers, c.heads)), labels)
    scores = np.zeros((c.layers, c.heads))
    for l in range(c.layers):
        for h in range(c.heads):
            m = np.ones((c.layers, c.heads))
            m[l, h] = 0.0
            scores[l, h] = mean_loss(predict_logits(model, tokens, HeadMask.from_array(m)), labels) - base
    return scores


def prune_posthoc(importance: np.ndarray, budget: float, floor: bool = True) -> HeadMask:
    layers, heads = importance.shape
    k = head_count(budget, layers, heads)
    values = select_top_k(importance, k, floor)
    return HeadMask.from_array(values, HARD_FLOORED if floor else HARD_GLOBAL, budget)


# ------------------------------------------------------------------ gate ranking

@dataclass
class RankStability:
    spearman: float | None
    retention: float
    budgets: tuple[float, float]
    note: str = ""


def spearman(x, y) -> float | None:
    """Spearman rho with average ranks for ties; None when either side is constant."""
    x, y = np.asarray(x, dtype=float).ravel(), np.asarray(y, dtype=float).ravel()
    if np.all(x == x[0]) or np.all(y == y[0]):
        return None
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    return float(np.corrcoef(rx, ry)[0, 1])


def gate_rank_stability(ckpt: Checkpoint | EncoderModel, b1: float, b2: float) -> RankStability:
    model = _as_model(ckpt)
    gp = model.gate_params
    if gp is None:
        raise ValueError("gate-rank stability needs a gated checkpoint")
    z1 = soft_gates(gp, b1).array
    z2 = soft_gates(gp, b2).array
    layers, heads = gp.shape
    top1 = select_top_k(z1, head_count(b1, layers, heads)).astype(bool)
    top2 = select_top_k(z2, head_count(b2, layers, heads)).astype(bool)
    retention = float((top1 & top2).sum() / top1.sum())
    rho = spearman(z1, z2)
    note = "" if rho is not None else "undefined: constant gate vector"
    return RankStability(rho, retention, (b1, b2), note)


# ------------------------------------------------------------------ reports

SWEEP_FIELDS = ("seed", "kind", "budget", "cost", "accuracy")


def write_sweep_csv(points: list[SweepPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for p in points:
            w.writerow(["" if p.seed is None else p.seed, p.kind, repr(p.budget), repr(p.cost), repr(p.accuracy)])


def read_sweep_csv(path: str | Path) -> list[SweepPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [SweepPoint(float(r["budget"]), float(r["cost"]), float(r["accuracy"]), r["kind"],
                       int(r["seed"]) if r["seed"] else None) for r in rows]


def _mean_std(xs: list[float]) -> tuple[float, float]:
    if len(xs) == 1:
        return xs[0], 0.0
    return statistics.fmean(xs), statistics.stdev(xs)


def summarize(points: list[SweepPoint], method: str | None = None) -> list[dict]:
    """Per (kind, budget) mean and sample standard deviation across seeds."""
    groups: dict[tuple, list[SweepPoint]] = defaultdict(list)
    for p in points:
        groups[(p.kind, p.budget)].append(p)
    rows = []
    for (kind, budget), ps in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        cost_m, cost_s = _mean_std([p.cost for p in ps])
        acc_m, acc_s = _mean_std([p.accuracy for p in ps])
        row = {"kind": kind, "budget": budget, "n_seeds": len(ps),
               "seeds": sorted({p.seed for p in ps if p.seed is not None}),
               "cost_mean": cost_m, "cost_std": cost_s,
               "accuracy_mean": acc_m, "accuracy_std": acc_s,
               "single_seed": len(ps) == 1}
        if method is not None:
            row = {"method": method, **row}
        rows.append(row)
    return rows


def pareto_report(points: list[SweepPoint], out_path: str | Path, method: str | None = None,
                  provenance: dict | None = None) -> dict:
    """Write ``<out>.csv`` (raw points) and ``<out>.json`` (mean +- std per budget)."""
    if not points:
        raise ValueError("pareto_report needs at least one point")
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(points, out.with_suffix(".csv"))
    summary = {"rows": summarize(points, method), "provenance": provenance or {}}
    out.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def format_pm(mean: float, std: float, scale: float = 1.0, digits: int = 3) -> str:
    if math.isnan(mean):
        return "n/a"
    return f"{mean * scale:.{digits}f}±{std * scale:.{digits}f}"


def points_from_dicts(rows: list[dict]) -> list[SweepPoint]:
    return [SweepPoint(**r) for r in rows]


def points_to_dicts(points: list[SweepPoint]) -> list[dict]:
    return [asdict(p) for p in points]
