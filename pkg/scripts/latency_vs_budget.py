"""Hard-skip latency and attention MACs across budgets for one trained seed.

Usage: python3 scripts/latency_vs_budget.py runs/robust 7
"""

import json
import sys
from pathlib import Path

from budgetattn.bench import measure_latency
from budgetattn.checkpoint import load_checkpoint
from budgetattn.evaluation import budget_mask
from budgetattn.model import OpCounter
from budgetattn.pipeline import RunLayout, data_from_meta, timed_split


def main(root: str, seed: int, budgets=(0.25, 0.5, 0.75, 1.0), examples: int = 512) -> list[dict]:
    lay = RunLayout(root)
    gated = load_checkpoint(lay.budgeted(seed))
    dense = load_checkpoint(lay.dense(seed, seed))
    split = timed_split(data_from_meta(gated.meta), examples)
    base = measure_latency(dense, split, "dense", repeats=3, seed=seed)
    model = gated.build_model()
    rows = []
    for b in budgets:
        rep = measure_latency(model, split, "hard_skip", b, repeats=3, seed=seed)
        counter = OpCounter()
        model.hard_skip_logits(split[0][:1], budget_mask(model, b, "hard"), counter)
        rows.append({"budget": b, "median_ms": rep.median_ms, "speedup": base.median_ms / rep.median_ms,
                     "accuracy": rep.accuracy, "attention_macs_per_example": counter.attention_macs()})
        print(f"B={b:.2f}  {rep.median_ms:8.1f} ms  {rows[-1]['speedup']:.2f}x  acc {rep.accuracy:.4f}  "
              f"MACs {counter.attention_macs()}")
    out = Path(root) / "report" / f"latency_vs_budget_s{seed}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"seed": seed, "dense_ms": base.median_ms, "rows": rows}, indent=2) + "\n")
    return rows


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "runs/robust", int(sys.argv[2]) if len(sys.argv) > 2 else 7)
