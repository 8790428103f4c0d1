import json

import numpy as np
import pytest

from budgetattn import cli
from budgetattn.checkpoint import load_checkpoint
from budgetattn.config import parse_config
from budgetattn.evaluation import read_sweep_csv
from budgetattn.gating import read_gate_csv
from budgetattn.pipeline import STAGE_ORDER, StageError, reproduce

TINY = """
[run]
out_dir = {out}
seeds = 7, 13
static_budgets = 0.5
prune_budgets = 0.5
bench_examples = 16
bench_warmup = 0
bench_repeats = 1
[data]
seq_len = 10
n_values = 3
n_train = 32
n_val = 16
n_test = 16
[model]
hidden = 8
layers = 2
heads = 2
ffn_dim = 8
[train]
epochs = 1
batch_size = 16
learning_rate = 0.003
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY.format(out=tmp_path / "run"))
    return path


def test_train_dense_writes_checkpoint_and_log(tiny_cfg, tmp_path, capsys):
    assert cli.main(["train", "dense", "--config", str(tiny_cfg), "--seed", "7"]) == 0
    ck = tmp_path / "run" / "dense" / "d7_o7.ckpt"
    assert ck.exists() and ck.with_suffix(".log.jsonl").exists()
    meta = load_checkpoint(ck).meta
    assert meta["seed"] == 7 and "[model]" in meta["run_config"]


def test_warm_start_copies_body(tiny_cfg, tmp_path):
    cli.main(["train", "dense", "--config", str(tiny_cfg), "--seed", "7"])
    dense = tmp_path / "run" / "dense" / "d7_o7.ckpt"
    out = tmp_path / "b.ckpt"
    assert cli.main(["train", "budgeted", "--config", str(tiny_cfg), "--seed", "7",
                     "--warm-start", str(dense), "--out", str(out)]) == 0
    b = load_checkpoint(out)
    assert b.gated and b.meta["warm_start"]["seed"] == 7


def test_missing_config_exits_nonzero(capsys):
    assert cli.main(["train", "dense", "--config", "/nope/robust.cfg"]) == 2
    assert "not found" in capsys.readouterr().err


def test_bad_config_reports_line(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("[model]\nhidden = 8\nbogus = 1\n")
    assert cli.main(["train", "dense", "--config", str(tmp_path / "bad.cfg")]) == 2
    assert "bad.cfg:3:" in capsys.readouterr().err


def test_missing_checkpoint(capsys):
    assert cli.main(["sweep", "--ckpt", "/nope.ckpt"]) == 2
    assert "not found" in capsys.readouterr().err


def test_reproduce_end_to_end_and_resume(tiny_cfg, tmp_path, capsys):
    cfg = parse_config(tiny_cfg.read_text())
    root = reproduce(cfg)
    manifest = json.loads((root / "manifest.json").read_text())
    assert all(manifest["stages"][s]["status"] == "done" for s in STAGE_ORDER)
    assert len(list((root / "dense").glob("*.ckpt"))) == 4
    for name in ("cost_quality.json", "latency.json", "stability.json", "summary.md", "pareto_budgeted.json"):
        assert (root / "report" / name).exists()
    lat = json.loads((root / "report" / "latency.json").read_text())
    assert {r["variant"] for r in lat["rows"]} == {"dense", "soft", "hard_skip"}
    # rerun skips everything, so no artifact is rewritten
    stamp = (root / "budgeted" / "s7.ckpt").stat().st_mtime_ns
    reproduce(cfg)
    assert (root / "budgeted" / "s7.ckpt").stat().st_mtime_ns == stamp

    # individual commands against the produced checkpoints
    b7 = root / "budgeted" / "s7.ckpt"
    assert cli.main(["sweep", "--ckpt", str(b7), "--out", str(tmp_path / "sw")]) == 0
    soft = read_sweep_csv(tmp_path / "sw_soft.csv")
    assert len(soft) == 19 and all(p.kind == "soft" for p in soft)
    assert cli.main(["sweep", "--ckpt", str(b7), "--config", str(tiny_cfg), "--out", str(tmp_path / "sw2")]) == 0
    assert cli.main(["prune", "--dense", str(root / "dense" / "d7_o7.ckpt"), "--budget", "0.5",
                     "--out", str(tmp_path / "mask.csv")]) == 0
    assert read_gate_csv(tmp_path / "mask.csv").sum() == 2
    assert cli.main(["report", "--runs", str(root)]) == 0


def test_sweep_rejects_incompatible_config(tiny_cfg, tmp_path, capsys):
    cli.main(["train", "dense", "--config", str(tiny_cfg), "--seed", "7"])
    dense = tmp_path / "run" / "dense" / "d7_o7.ckpt"
    cli.main(["train", "budgeted", "--config", str(tiny_cfg), "--warm-start", str(dense),
              "--out", str(tmp_path / "b.ckpt")])
    other = tmp_path / "other.cfg"
    other.write_text(tiny_cfg.read_text().replace("hidden = 8", "hidden = 12"))
    assert cli.main(["sweep", "--ckpt", str(tmp_path / "b.ckpt"), "--config", str(other)]) == 2
    assert "incompatible" in capsys.readouterr().err


def test_stage_failure_names_stage(tiny_cfg, tmp_path):
    cfg = parse_config(tiny_cfg.read_text())
    with pytest.raises(StageError, match="'budgeted'"):
        reproduce(cfg, only=["budgeted"])  # no dense checkpoints yet
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["stages"]["budgeted"]["status"] == "failed"


def test_reproduce_refuses_changed_config(tiny_cfg, tmp_path):
    cfg = parse_config(tiny_cfg.read_text())
    reproduce(cfg, only=["dense"])
    changed = parse_config(tiny_cfg.read_text().replace("learning_rate = 0.003", "learning_rate = 0.001"))
    with pytest.raises(ValueError, match="different config"):
        reproduce(changed, only=["dense"])


def test_worker_cap_env(monkeypatch):
    from budgetattn.pipeline import worker_count
    monkeypatch.setenv("BUDGETATTN_WORKERS", "2")
    assert worker_count(9) == 2 and worker_count(1) == 1
    monkeypatch.setenv("BUDGETATTN_WORKERS", "0")
    with pytest.raises(ValueError):
        worker_count(3)


def test_deterministic_rerun(tiny_cfg, tmp_path):
    a = parse_config(tiny_cfg.read_text())
    reproduce(a, tmp_path / "r1", only=["dense"])
    reproduce(a, tmp_path / "r2", only=["dense"])
    x = load_checkpoint(tmp_path / "r1" / "dense" / "d13_o7.ckpt")
    y = load_checkpoint(tmp_path / "r2" / "dense" / "d13_o7.ckpt")
    for k in x.params:
        assert np.array_equal(x.params[k], y.params[k])
