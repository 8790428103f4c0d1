"""Budget-conditioned head gates, hard top-k selection and the straight-through path."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

BUDGET_EPS = 1e-4

SOFT = "soft"
HARD_GLOBAL = "hard_global"
HARD_FLOORED = "hard_floored"
MASK_KINDS = (SOFT, HARD_GLOBAL, HARD_FLOORED)


class InfeasibleBudgetError(ValueError):
    """Raised when a per-layer floor cannot be met with k(B) heads."""


@dataclass
class GateParams:
    """Per-head logits ``a`` and raw sensitivities ``s`` (both L x H)."""

    a: Tensor
    s: Tensor
    tau: float = 1.0
    eps: float = BUDGET_EPS

    def __post_init__(self):
        if self.a.shape != self.s.shape or self.a.ndim != 2:
            raise ValueError(f"gate logits {self.a.shape} and sensitivities {self.s.shape} must be equal L x H")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0 < self.eps < 0.5:
            raise ValueError(f"eps must lie in (0, 0.5), got {self.eps}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape

    @classmethod
    def init(cls, layers: int, heads: int, rng: np.random.Generator,
             tau: float = 1.0, eps: float = BUDGET_EPS) -> "GateParams":
        a = rng.normal(0.0, 0.02, size=(layers, heads))
        # softplus(s) == 1
        s = np.full((layers, heads), math.log(math.e - 1.0))
        return cls(Tensor(a, requires_grad=True), Tensor(s, requires_grad=True), tau, eps)

    def sensitivity(self) -> np.ndarray:
        return np.logaddexp(0.0, self.s.data)


@dataclass
class HeadMask:
    values: Tensor
    kind: str
    budget: float | None = None

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.values.ndim != 2:
            raise ValueError(f"mask must be L x H, got shape {self.values.shape}")

    @property
    def array(self) -> np.ndarray:
        return self.values.data

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def is_binary(self) -> bool:
        v = self.values.data
        return bool(np.all((v == 0.0) | (v == 1.0)))

    def active_heads(self) -> list[tuple[int, int]]:
        return [tuple(map(int, ij)) for ij in np.argwhere(self.values.data > 0.5)]

    @classmethod
    def ones(cls, layers: int, heads: int) -> "HeadMask":
        return cls(Tensor(np.ones((layers, heads))), HARD_GLOBAL, 1.0)

    @classmethod
    def from_array(cls, values, kind: str = HARD_GLOBAL, budget: float | None = None) -> "HeadMask":
        return cls(Tensor(np.array(values, dtype=np.float64)), kind, budget)


def clip_budget(budget: float, eps: float = BUDGET_EPS) -> float:
    if not (0.0 < budget <= 1.0):
        raise ValueError(f"budget must lie in (0, 1], got {budget}")
    return min(max(budget, eps), 1.0 - eps)


def soft_gates(params: GateParams, budget: float) -> HeadMask:
    """z = sigmoid((a + softplus(s) * logit(B_clipped)) / tau), differentiable in a and s."""
    clipped = clip_budget(budget, params.eps)
    lb = math.log(clipped) - math.log(1.0 - clipped)
    pre = T.add(params.a, T.mul(T.softplus(params.s), lb))
    if params.tau != 1.0:
        pre = T.mul(pre, 1.0 / params.tau)
    return HeadMask(T.sigmoid(pre), SOFT, budget)


def estimated_cost(mask: HeadMask | Tensor) -> Tensor:
    values = mask.values if isinstance(mask, HeadMask) else mask
    if values.data.size == 0:
        raise ValueError("cost of an empty mask")
    return T.mean(values)


def head_count(budget: float, layers: int, heads: int) -> int:
    """k = max(1, round(B * L * H)), rounding halves away from zero."""
    if not (0.0 < budget <= 1.0):
        raise ValueError(f"budget must lie in (0, 1], got {budget}")
    if layers < 1 or heads < 1:
        raise ValueError("layers and heads must be positive")
    # product rounded first so 0.35 * 10 counts as 3.5, not 3.4999999999999996
    x = round(budget * layers * heads, 9)
    return max(1, min(layers * heads, math.floor(x + 0.5)))


def select_top_k(scores: np.ndarray, k: int, floor: bool = False) -> np.ndarray:
    """Binary L x H selection of the ``k`` highest scores.

    Ties break by (layer, head) ascending. With ``floor`` each layer's best head
    is taken first and the remaining ``k - L`` slots go by global rank.
    """
    scores = np.asarray(scores, dtype=np.float64)
    layers, heads = scores.shape
    if not 1 <= k <= layers * heads:
        raise ValueError(f"k={k} outside [1, {layers * heads}]")
    if floor and k < layers:
        raise InfeasibleBudgetError(f"per-layer floor needs k >= {layers} heads, got k={k}")
    flat = scores.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    chosen = np.zeros(flat.size, dtype=bool)
    if floor:
        chosen[np.arange(layers) * heads + np.argmax(scores, axis=1)] = True
    remaining = k - int(chosen.sum())
    for i in order:
        if remaining == 0:
            break
        if not chosen[i]:
            chosen[i] = True
            remaining -= 1
    return chosen.reshape(layers, heads).astype(np.float64)


def hard_mask(soft: HeadMask, k: int, floor: bool = False) -> HeadMask:
    values = select_top_k(soft.array, k, floor)
    return HeadMask(Tensor(values), HARD_FLOORED if floor else HARD_GLOBAL, soft.budget)


def hard_mask_for_budget(params: GateParams, budget: float, floor: bool = False) -> HeadMask:
    soft = soft_gates(params, budget)
    layers, heads = params.shape
    return hard_mask(soft, head_count(budget, layers, heads), floor)


def straight_through_gates(params: GateParams, budget: float) -> HeadMask:
    """Hard global top-k values forward, soft-gate gradients backward."""
    soft = soft_gates(params, budget)
    layers, heads = params.shape
    hard = hard_mask(soft, head_count(budget, layers, heads), floor=False)
    return HeadMask(T.straight_through(soft.values, hard.array), HARD_GLOBAL, budget)


def write_gate_csv(values: np.ndarray, path: str | Path) -> None:
    values = np.asarray(values, dtype=np.float64)
    lines = [",".join(f"{v:.17g}" for v in row) for row in values]
    Path(path).write_text("\n".join(lines) + "\n")


def read_gate_csv(path: str | Path) -> np.ndarray:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
