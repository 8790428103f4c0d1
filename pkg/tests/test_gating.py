import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from budgetattn import tensor as T
from budgetattn.gating import (HARD_FLOORED, HARD_GLOBAL, SOFT, GateParams, HeadMask,
                               InfeasibleBudgetError, clip_budget, estimated_cost, hard_mask,
                               head_count, read_gate_csv, select_top_k, soft_gates,
                               straight_through_gates, write_gate_csv)
from budgetattn.tensor import Graph, Tensor

SP_ONE = math.log(math.e - 1.0)  # softplus(SP_ONE) == 1


def params(a, s=None, tau=1.0):
    a = np.asarray(a, dtype=float)
    s = np.full_like(a, SP_ONE) if s is None else np.asarray(s, dtype=float)
    return GateParams(Tensor(a, True), Tensor(s, True), tau)


def soft_mask(values):
    return HeadMask(Tensor(np.asarray(values, dtype=float)), SOFT, 0.5)


# ---------------------------------------------------------------- clip_budget

def test_clip_budget_examples():
    assert clip_budget(1.0) == 0.9999
    assert clip_budget(0.5) == 0.5
    assert clip_budget(1e-9) == 1e-4


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.0000001])
def test_clip_budget_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        clip_budget(bad)


# ---------------------------------------------------------------- soft gates

def test_soft_gate_examples():
    assert soft_gates(params(np.zeros((1, 1))), 0.5).array[0, 0] == 0.5
    z = soft_gates(params(np.ones((1, 1)), s=np.array([[-3.0]])), 0.5).array[0, 0]
    assert z == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    assert z == pytest.approx(0.731059, abs=1e-6)


def test_soft_gates_is_differentiable_in_a_and_s():
    g = Graph()
    rng = np.random.default_rng(1)
    a = g.register("a", rng.normal(size=(2, 3)))
    s = g.register("s", rng.normal(size=(2, 3)))
    gp = GateParams(a, s, tau=0.7)
    w = rng.normal(size=(2, 3))
    loss = lambda: T.sum_(T.mul(soft_gates(gp, 0.3).values, w))
    assert T.grad_check(g, loss, "a") < 1e-6
    assert T.grad_check(g, loss, "s") < 1e-6


def test_gate_params_validation():
    with pytest.raises(ValueError):
        params(np.zeros((2, 2)), tau=0.0)
    with pytest.raises(ValueError):
        GateParams(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), eps=0.5)
    with pytest.raises(ValueError):
        GateParams(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


def test_gate_init_near_open_with_unit_sensitivity():
    gp = GateParams.init(4, 4, np.random.default_rng(0))
    np.testing.assert_allclose(gp.sensitivity(), 1.0, rtol=1e-12)
    assert np.abs(gp.a.data).max() < 0.1


finite = st.floats(-6, 6, allow_nan=False)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite),
       st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_soft_gates_monotone_in_budget(a, s, b1, b2):
    lo, hi = sorted((b1, b2))
    gp = params(a, s)
    z_lo, z_hi = soft_gates(gp, lo).array, soft_gates(gp, hi).array
    assert np.all(z_lo <= z_hi)
    assert estimated_cost(soft_gates(gp, lo)).item() <= estimated_cost(soft_gates(gp, hi)).item()


def test_cost_monotone_across_nineteen_budgets():
    gp = GateParams.init(4, 4, np.random.default_rng(5))
    gp.s.data[:] = np.random.default_rng(6).normal(size=(4, 4))
    costs = [estimated_cost(soft_gates(gp, round(0.10 + 0.05 * i, 10))).item() for i in range(19)]
    assert all(b >= a for a, b in zip(costs, costs[1:]))


# ---------------------------------------------------------------- cost / head_count

def test_estimated_cost_examples():
    assert estimated_cost(HeadMask.ones(4, 4)).item() == 1.0
    assert estimated_cost(soft_mask(np.full((4, 4), 0.5))).item() == 0.5
    half = np.zeros(16)
    half[::2] = 1.0
    assert estimated_cost(HeadMask.from_array(half.reshape(4, 4))).item() == 0.5


def test_estimated_cost_rejects_empty():
    with pytest.raises(ValueError):
        estimated_cost(Tensor(np.zeros((0, 0))))


def test_head_count_examples():
    assert head_count(0.50, 4, 4) == 8
    assert head_count(0.01, 2, 2) == 1
    k = head_count(0.10, 4, 4)
    assert k == 2 and k / 16 == 0.125


def test_head_count_rounds_half_away_from_zero():
    assert head_count(0.625, 2, 2) == 3  # 2.5 -> 3
    assert head_count(0.375, 2, 2) == 2  # 1.5 -> 2
    assert head_count(0.35, 2, 5) == 4  # 3.5 despite float product 3.4999...


@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.integers(1, 6), st.integers(1, 6))
def test_head_count_monotone_and_bounded(b1, b2, layers, heads):
    lo, hi = sorted((b1, b2))
    k_lo, k_hi = head_count(lo, layers, heads), head_count(hi, layers, heads)
    assert 1 <= k_lo <= k_hi <= layers * heads


# ---------------------------------------------------------------- hard masks

def test_hard_mask_single_head_at_argmax():
    v = np.random.default_rng(2).permutation(16).reshape(4, 4) / 16.0
    m = hard_mask(soft_mask(v), 1)
    assert m.array.sum() == 1 and m.array[np.unravel_index(np.argmax(v), v.shape)] == 1
    assert m.kind == HARD_GLOBAL


def test_hard_mask_uniform_ties_break_by_index():
    m = hard_mask(soft_mask(np.full((4, 4), 0.3)), 3)
    assert m.active_heads() == [(0, 0), (0, 1), (0, 2)]


def floor_oracle(values: np.ndarray, k: int) -> np.ndarray:
    """Exhaustive search over every k-subset; keep the feasible one with the largest soft mass."""
    layers, heads = values.shape
    flat = values.reshape(-1)
    best, best_mass = None, -np.inf
    for combo in itertools.combinations(range(flat.size), k):
        rows = {i // heads for i in combo}
        if len(rows) < layers:
            continue
        mass = flat[list(combo)].sum()
        if mass > best_mass:
            best, best_mass = combo, mass
    out = np.zeros(flat.size)
    out[list(best)] = 1.0
    return out.reshape(layers, heads)


@pytest.mark.parametrize("seed", range(5))
def test_floored_hard_mask_matches_exhaustive_oracle(seed):
    v = np.random.default_rng(seed).uniform(size=(4, 4))
    # concentrate mass in one layer so the floor actually binds
    v[0] += 1.0
    m = hard_mask(soft_mask(v), 8, floor=True)
    assert m.kind == HARD_FLOORED
    assert np.array_equal(m.array, floor_oracle(v, 8))


def test_floor_infeasible_budget():
    with pytest.raises(InfeasibleBudgetError):
        hard_mask(soft_mask(np.ones((4, 4))), 3, floor=True)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(0, 1)), st.integers(1, 16), st.booleans())
def test_hard_mask_invariants(v, k, floor):
    if floor and k < 4:
        return
    m = hard_mask(soft_mask(v), k, floor)
    assert m.array.sum() == k
    assert m.is_binary()
    assert estimated_cost(m).item() == k / 16
    if floor:
        assert np.all(m.array.sum(axis=1) >= 1)


# ---------------------------------------------------------------- straight-through

def test_straight_through_forward_equals_hard_mask():
    gp = GateParams.init(4, 4, np.random.default_rng(3))
    gp.a.data[:] = np.random.default_rng(4).normal(size=(4, 4))
    for b in (0.1, 0.33, 0.5, 0.9):
        st_mask = straight_through_gates(gp, b)
        ref = hard_mask(soft_gates(gp, b), head_count(b, 4, 4), floor=False)
        assert np.array_equal(st_mask.array, ref.array)
        assert set(np.unique(st_mask.array)) <= {0.0, 1.0}


def test_straight_through_near_full_budget_is_all_ones():
    gp = GateParams.init(4, 4, np.random.default_rng(3))
    assert np.array_equal(straight_through_gates(gp, 0.999).array, np.ones((4, 4)))


def test_straight_through_gradient_equals_soft_path():
    rng = np.random.default_rng(9)
    g = Graph()
    a = g.register("a", rng.normal(size=(3, 4)))
    s = g.register("s", rng.normal(size=(3, 4)))
    gp = GateParams(a, s)
    w = rng.normal(size=(3, 4))
    g.forward(lambda: T.sum_(T.mul(T.square(straight_through_gates(gp, 0.4).values), w)))
    st_grad = g.backward()["a"].copy()
    # upstream gradient at the hard values, then back through the soft gates alone
    hard = straight_through_gates(gp, 0.4).array
    upstream = 2.0 * hard * w
    g.forward(lambda: T.sum_(T.mul(soft_gates(gp, 0.4).values, upstream)))
    assert np.array_equal(st_grad, g.backward()["a"])


# ---------------------------------------------------------------- CSV export

def test_gate_csv_roundtrip(tmp_path):
    v = np.random.default_rng(0).uniform(size=(4, 4))
    write_gate_csv(v, tmp_path / "g.csv")
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert len(lines) == 4 and all(len(line.split(",")) == 4 for line in lines)
    assert np.array_equal(read_gate_csv(tmp_path / "g.csv"), v)


def test_select_top_k_range_checked():
    with pytest.raises(ValueError):
        select_top_k(np.zeros((2, 2)), 0)
    with pytest.raises(ValueError):
        select_top_k(np.zeros((2, 2)), 5)
