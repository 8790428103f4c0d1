import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import log_softmax

from budgetattn import evaluation as E
from budgetattn.evaluation import (MonotonicityError, SweepPoint, budget_sweep, evaluate, gate_rank_stability,
                                   parse_budget_range, pareto_report, prune_posthoc, read_sweep_csv, score_heads,
                                   spearman, summarize, sweep_budgets, write_sweep_csv)
from budgetattn.gating import HeadMask, head_count
from budgetattn.model import EncoderModel, ModelConfig, forward_gated

CFG = ModelConfig(vocab_size=9, seq_len=8, hidden=8, layers=2, heads=2, ffn_dim=8)
CFG4 = ModelConfig(vocab_size=9, seq_len=8, hidden=16, layers=4, heads=4, ffn_dim=8)


def toy_split(n=24, seed=0, cfg=CFG):
    rng = np.random.default_rng(seed)
    return rng.integers(1, cfg.vocab_size, size=(n, cfg.seq_len)), rng.integers(0, cfg.num_classes, size=n)


@pytest.fixture(scope="module")
def gated4():
    m = EncoderModel(CFG4, seed=3, gated=True)
    rng = np.random.default_rng(4)
    m.gate_params.a.data[:] = rng.normal(size=(4, 4))
    m.gate_params.s.data[:] = rng.normal(size=(4, 4))
    return m


# ---------------------------------------------------------------- evaluate / sweep

def test_budget_ranges():
    assert len(sweep_budgets()) == 19
    assert sweep_budgets()[0] == 0.10 and sweep_budgets()[-1] == 1.00
    assert parse_budget_range("0.10:1.00:0.05") == sweep_budgets()
    with pytest.raises(ValueError):
        parse_budget_range("0.5:0.1:0.1")


def test_all_ones_cost_and_hard_half(gated4):
    split = toy_split(cfg=CFG4)
    assert evaluate(gated4, split, HeadMask.ones(4, 4))[1] == 1.0
    assert evaluate(gated4, split, 0.5, "hard")[1] == 0.5


def test_empty_split(gated4):
    with pytest.raises(ValueError, match="empty"):
        evaluate(gated4, (np.zeros((0, 8), dtype=int), np.zeros(0, dtype=int)), 0.5)


def test_sweep_shape_monotone_and_exact_hard_cost(gated4):
    pts = budget_sweep(gated4, toy_split(cfg=CFG4), seed=7)
    soft = [p for p in pts if p.kind == "soft"]
    hard = [p for p in pts if p.kind == "hard"]
    assert len(soft) == len(hard) == 19
    assert all(b.cost >= a.cost for a, b in zip(soft, soft[1:]))
    for p in hard:
        assert p.cost == head_count(p.budget, 4, 4) / 16
        assert p.seed == 7


def test_flat_cost_when_sensitivity_vanishes():
    m = EncoderModel(CFG4, seed=3, gated=True)
    m.gate_params.s.data[:] = -50.0
    soft = [p for p in budget_sweep(m, toy_split(8, cfg=CFG4)) if p.kind == "soft"]
    assert max(p.cost for p in soft) - min(p.cost for p in soft) < 1e-12


def test_single_full_budget_uses_clipped_budget(gated4):
    pts = budget_sweep(gated4, toy_split(8, cfg=CFG4), [1.0])
    from budgetattn.gating import soft_gates
    assert pts[0].cost == pytest.approx(soft_gates(gated4.gate_params, 0.9999).array.mean(), abs=1e-15)


def test_monotonicity_violation_is_named():
    pts = [SweepPoint(0.1, 0.3, 1.0, "soft"), SweepPoint(0.15, 0.2, 1.0, "soft")]
    with pytest.raises(MonotonicityError, match="soft cost fell"):
        E.check_monotone(pts)


def test_unsorted_budgets_rejected(gated4):
    with pytest.raises(ValueError):
        budget_sweep(gated4, toy_split(cfg=CFG4), [0.5, 0.2])


# ---------------------------------------------------------------- head importance

def loss_oracle(model, tokens, labels, mask):
    """Independent evaluator: tape forward pass and a scipy cross-entropy."""
    logits = forward_gated(model, tokens, HeadMask.from_array(mask))
    return -np.mean(log_softmax(logits, axis=1)[np.arange(len(labels)), labels])


def test_score_heads_matches_mask_and_evaluate_oracle():
    m = EncoderModel(CFG, seed=5)
    tok, lab = toy_split(30, seed=1)
    base = loss_oracle(m, tok, lab, np.ones((2, 2)))
    expected = np.zeros((2, 2))
    for l, h in itertools.product(range(2), range(2)):
        mask = np.ones((2, 2))
        mask[l, h] = 0.0
        expected[l, h] = loss_oracle(m, tok, lab, mask) - base
    np.testing.assert_allclose(score_heads(m, (tok, lab)), expected, atol=1e-12, rtol=0)


def test_score_of_dead_head_is_zero():
    m = EncoderModel(CFG, seed=5)
    dh = CFG.head_dim
    m.params["layer1.attn.wo"].data[dh:2 * dh, :] = 0.0
    scores = score_heads(m, toy_split(20, seed=2))
    assert abs(scores[1, 1]) < 1e-9


def test_score_heads_pass_count(monkeypatch):
    calls = []
    real = E.predict_logits
    monkeypatch.setattr(E, "predict_logits", lambda *a, **k: calls.append(1) or real(*a, **k))
    score_heads(EncoderModel(CFG, seed=5), toy_split(10))
    assert len(calls) == CFG.layers * CFG.heads + 1


def test_score_heads_order_independent():
    m = EncoderModel(CFG, seed=6)
    tok, lab = toy_split(40, seed=3)
    perm = np.random.default_rng(0).permutation(40)
    np.testing.assert_allclose(score_heads(m, (tok, lab)), score_heads(m, (tok[perm], lab[perm])), atol=1e-9)


def test_prune_ties_and_counts():
    m = prune_posthoc(np.ones((4, 4)), 0.25, floor=True)
    assert m.active_heads() == [(0, 0), (1, 0), (2, 0), (3, 0)]
    assert prune_posthoc(np.random.default_rng(0).normal(size=(4, 4)), 0.75).array.sum() == 12


def test_prune_matches_exhaustive_floor_oracle():
    imp = np.random.default_rng(8).normal(size=(3, 3))
    imp[0] += 5.0
    k = head_count(0.5, 3, 3)
    best, best_mass = None, -np.inf
    for combo in itertools.combinations(range(9), k):
        if len({i // 3 for i in combo}) == 3 and imp.ravel()[list(combo)].sum() > best_mass:
            best, best_mass = combo, imp.ravel()[list(combo)].sum()
    expected = np.zeros(9)
    expected[list(best)] = 1
    assert np.array_equal(prune_posthoc(imp, 0.5, floor=True).array.ravel(), expected)


# ---------------------------------------------------------------- ranking

def rank_formula(x, y):
    """Textbook rho = 1 - 6 sum d^2 / (n (n^2 - 1)) for untied data."""
    rx = np.argsort(np.argsort(x))
    ry = np.argsort(np.argsort(y))
    n = len(x)
    return 1 - 6 * np.sum((rx - ry) ** 2) / (n * (n * n - 1))


def test_spearman_examples():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3, 5, 4], [1, 2, 3, 4, 5]) == pytest.approx(0.9, abs=1e-12)
    assert spearman([1, 1, 1], [1, 2, 3]) is None


def test_spearman_all_permutations_of_five():
    base = np.arange(5)
    for perm in itertools.permutations(range(5)):
        assert spearman(base, perm) == pytest.approx(rank_formula(base, np.array(perm)), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-100, 100), min_size=3, max_size=12, unique=True))
def test_spearman_invariant_to_monotone_maps(xs):
    x = np.array(xs, dtype=float)
    assert spearman(x, np.exp(x / 50.0) * 3 + 1) == pytest.approx(1.0)


def test_gate_rank_stability(gated4):
    rs = gate_rank_stability(gated4, 0.25, 0.75)
    assert -1.0 <= rs.spearman <= 1.0 and 0.0 <= rs.retention <= 1.0
    flat = EncoderModel(CFG4, seed=1, gated=True)
    flat.gate_params.a.data[:] = 0.0
    rs = gate_rank_stability(flat, 0.25, 0.75)
    assert rs.spearman is None and "undefined" in rs.note and rs.retention == 1.0


# ---------------------------------------------------------------- reports

def test_summarize_three_equal_seeds():
    pts = [SweepPoint(0.5, 0.5, 0.9, "soft", s) for s in (7, 13, 21)]
    row = summarize(pts)[0]
    assert row["accuracy_mean"] == pytest.approx(0.9) and row["accuracy_std"] == 0.0
    assert not row["single_seed"]


def test_single_seed_flagged():
    row = summarize([SweepPoint(0.5, 0.5, 0.8, "soft", 7)])[0]
    assert row["accuracy_std"] == 0.0 and row["single_seed"]


def test_table_shaped_fixture(tmp_path):
    # three seeds at two budgets; means are exact by construction
    acc = {0.25: (0.996, 0.994, 1.000), 0.50: (1.000, 1.000, 1.000)}
    cost = {0.25: (0.30, 0.31, 0.30), 0.50: (0.50, 0.51, 0.50)}
    pts = [SweepPoint(b, cost[b][i], acc[b][i], "soft", s) for b in acc for i, s in enumerate((7, 13, 21))]
    summary = pareto_report(pts, tmp_path / "t1", "budgeted", {"seed": [7, 13, 21]})
    rows = {r["budget"]: r for r in summary["rows"]}
    assert rows[0.25]["accuracy_mean"] == pytest.approx(0.99666666666666667, abs=1e-15)
    assert rows[0.50]["accuracy_mean"] == 1.0
    assert rows[0.25]["cost_mean"] == pytest.approx(0.30333333333333334, abs=1e-15)
    assert json.loads((tmp_path / "t1.json").read_text())["provenance"] == {"seed": [7, 13, 21]}
    assert read_sweep_csv(tmp_path / "t1.csv") == pts


def test_pareto_report_needs_points(tmp_path):
    with pytest.raises(ValueError):
        pareto_report([], tmp_path / "x")


def test_sweep_csv_roundtrip(tmp_path):
    pts = [SweepPoint(0.1, 0.123456789012345, 0.5, "hard", None), SweepPoint(0.2, 0.2, 1.0, "soft", 13)]
    write_sweep_csv(pts, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "seed,kind,budget,cost,accuracy"
    assert read_sweep_csv(tmp_path / "s.csv") == pts
