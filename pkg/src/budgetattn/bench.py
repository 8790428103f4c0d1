"""Single-thread CPU latency for dense, soft-gated and hard-skip inference."""

from __future__ import annotations

import json
import os
import platform
import statistics
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import threadpoolctl

from .checkpoint import Checkpoint
from .data import Example, as_arrays
from .gating import hard_mask_for_budget, soft_gates
from .model import EncoderModel

MODES = ("dense", "soft", "hard_skip")


class ThreadPinningError(RuntimeError):
    pass


@dataclass
class LatencyReport:
    variant: str
    budget: float
    times_ms: list[float]
    median_ms: float
    mean_ms: float
    accuracy: float
    seed: int | None = None
    n_examples: int = 0
    batch_size: int = 64
    warmup: int = 0
    environment: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyReport":
        return cls(**d)


def _cpu_model() -> str:
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.lower().startswith("model name"):
                return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def environment() -> dict:
    return {
        "os": platform.platform(),
        "cpu": _cpu_model(),
        "cpu_count": os.cpu_count(),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "thread_pools": [
            {k: info.get(k) for k in ("internal_api", "num_threads", "version")}
            for info in threadpoolctl.threadpool_info()
        ],
    }


@contextmanager
def single_thread():
    """Limit every native thread pool to one thread and verify it took effect."""
    with threadpoolctl.threadpool_limits(limits=1):
        pools = threadpoolctl.threadpool_info()
        if not pools:
            raise ThreadPinningError("no controllable native thread pool found; cannot verify single-thread timing")
        bad = [p for p in pools if p.get("num_threads") != 1]
        if bad:
            raise ThreadPinningError(f"thread pools refused the single-thread limit: {bad}")
        yield pools


def _batches(tokens: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [np.ascontiguousarray(tokens[i:i + batch_size]) for i in range(0, len(tokens), batch_size)]


def _runner(model: EncoderModel, mode: str, budget: float):
    if mode == "dense":
        return lambda b: model.infer_logits(b)
    if model.gate_params is None:
        raise ValueError(f"mode {mode!r} needs a gated checkpoint")
    if mode == "soft":
        gates = soft_gates(model.gate_params, budget).array
        return lambda b: model.infer_logits(b, gates)
    if mode == "hard_skip":
        mask = hard_mask_for_budget(model.gate_params, budget, floor=False).array
        return lambda b: model.infer_logits(b, mask, skip=True)
    raise ValueError(f"unknown latency mode {mode!r}; choose from {MODES}")


def measure_latency(ckpt: Checkpoint | EncoderModel, split: list[Example] | tuple, mode: str,
                    budget: float = 1.0, warmup: int = 2, repeats: int = 5, batch_size: int = 64,
                    seed: int | None = None, return_logits: bool = False):
    """Median and mean wall time (ms) of full passes over ``split`` on one thread."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    model = ckpt if isinstance(ckpt, EncoderModel) else ckpt.build_model()
    tokens, labels = split if isinstance(split, tuple) else as_arrays(split)
    batches = _batches(tokens, batch_size)
    run = _runner(model, mode, budget)
    with single_thread():
        env = environment()
        for _ in range(warmup):
            for b in batches:
                run(b)
        times = []
        for _ in range(repeats):
            outs = []
            t0 = time.perf_counter()
            for b in batches:
                outs.append(run(b))
            times.append((time.perf_counter() - t0) * 1000.0)
    logits = np.concatenate(outs)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    report = LatencyReport(mode, budget if mode != "dense" else 1.0, times, statistics.median(times),
                           statistics.fmean(times), acc, seed, len(tokens), batch_size, warmup, env)
    return (report, logits) if return_logits else report


def speedup(dense_by_seed: dict, method_by_seed: dict) -> tuple[float, float]:
    """Mean and sample std of per-seed dense/method median-latency ratios."""
    if set(dense_by_seed) != set(method_by_seed):
        raise ValueError(f"seed sets differ: {sorted(dense_by_seed)} vs {sorted(method_by_seed)}")
    if not dense_by_seed:
        raise ValueError("no seeds to compare")

    def ms(r):
        return r.median_ms if isinstance(r, LatencyReport) else float(r)

    ratios = [ms(dense_by_seed[s]) / ms(method_by_seed[s]) for s in sorted(dense_by_seed)]
    std = statistics.stdev(ratios) if len(ratios) > 1 else 0.0
    return statistics.fmean(ratios), std


def write_report(report: LatencyReport, path: str | Path, provenance: dict | None = None) -> None:
    d = report.to_dict()
    d["provenance"] = provenance or {}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def read_report(path: str | Path) -> LatencyReport:
    d = json.loads(Path(path).read_text())
    d.pop("provenance", None)
    return LatencyReport.from_dict(d)
