"""Dense, budgeted, static and hard-adaptation training pipelines."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import DatasetSplit, as_arrays
from .evaluation import CANONICAL_BUDGETS, HARD_KIND, SOFT_KIND, accuracy_of, budget_mask, predict_logits
from .gating import GateParams, estimated_cost, soft_gates, straight_through_gates
from .model import EncoderModel, ModelConfig
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

MODES = ("dense", "budgeted", "static", "hard_adapt")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, step: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {detail}")
        self.epoch, self.step = epoch, step


@dataclass
class TrainConfig:
    mode: str = "dense"
    optimizer: str = "adamw"
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    epochs: int = 32
    batch_size: int = 64
    budget_lo: float = 0.25
    budget_hi: float = 1.00
    fixed_budget: float = 0.5
    lam: float = 0.02
    beta: float = 2.0
    alpha: float = 0.5
    temperature: float = 2.0
    grad_clip: float = 1.0
    patience: int = 0
    target_accuracy: float = 1.1
    seed: int = 7

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; choose from {MODES}")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if not 0.0 < self.budget_lo <= self.budget_hi <= 1.0:
            raise ValueError("budget range must satisfy 0 < lo <= hi <= 1")
        if not 0.0 < self.fixed_budget <= 1.0:
            raise ValueError("fixed_budget must lie in (0, 1]")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lambda and beta must be nonnegative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------------ losses

def budgeted_loss(logits, labels, cost, budget: float, lam: float, beta: float) -> Tensor:
    """cross-entropy + lam * C + beta * max(0, C - B)^2."""
    if not 0.0 < budget <= 1.0:
        raise ValueError(f"budget must lie in (0, 1], got {budget}")
    cost = T.as_tensor(cost)
    if not -1e-12 <= cost.item() <= 1.0 + 1e-12:
        raise ValueError(f"cost must lie in [0, 1], got {cost.item()}")
    violation = T.square(T.relu(T.sub(cost, budget)))
    return T.add(T.add(T.cross_entropy(logits, labels), T.mul(cost, lam)), T.mul(violation, beta))


def kl_divergence(teacher_logits: np.ndarray, student_logits, temperature: float) -> Tensor:
    """Batch-mean KL(softmax(teacher / T) || softmax(student / T))."""
    t = np.asarray(teacher_logits, dtype=np.float64) / temperature
    log_pt = T._log_softmax(t, -1)
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(T.mul(student_logits, 1.0 / temperature), -1)
    per_row = T.sum_(T.mul(T.sub(log_pt, log_ps), pt), axis=-1)
    return T.mean(per_row)


def distill_loss(student_logits, teacher_logits: np.ndarray, labels, alpha: float,
                 temperature: float) -> Tensor:
    """(1 - alpha) * CE(labels, student) + alpha * T^2 * KL(teacher || student) at temperature T."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    student_logits = T.as_tensor(student_logits)
    if np.shape(teacher_logits) != student_logits.shape:
        raise ValueError(f"teacher {np.shape(teacher_logits)} vs student {student_logits.shape} logits")
    kl = kl_divergence(teacher_logits, student_logits, temperature)
    ce = T.cross_entropy(student_logits, labels)
    return T.add(T.mul(ce, 1.0 - alpha), T.mul(kl, alpha * temperature ** 2))


# ------------------------------------------------------------------ optimizer

def _decays(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return name.startswith("emb.") or leaf in ("wq", "wk", "wv", "wo", "w1", "w2", "w")


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.wd = params, lr, weight_decay
        self.b1, self.b2, self.eps = betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if not p.requires_grad:
                continue
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd and _decays(k):
                p.data *= 1.0 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ------------------------------------------------------------------ shared loop

class JsonlLog:
    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, **record) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng([seed, sum(ord(ch) * 31 ** i for i, ch in enumerate(tag)) % (2 ** 32)])


def sample_budget(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _fit(model: EncoderModel, data: DatasetSplit, cfg: TrainConfig,
         batch_loss: Callable[[np.ndarray, np.ndarray, np.random.Generator], tuple[Tensor, dict]],
         select: Callable[[EncoderModel], tuple[float, dict]],
         log_fn: JsonlLog, epochs: int | None = None, select_best: bool = True) -> tuple[dict, float, int]:
    tokens, labels = as_arrays(data.train)
    opt = AdamW(model.params, cfg.learning_rate, cfg.weight_decay)
    order_rng = _rng(cfg.seed, "order")
    budget_rng = _rng(cfg.seed, "budget")
    best_state, best_score, best_epoch, stale = None, -math.inf, 0, 0
    epochs = cfg.epochs if epochs is None else epochs
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        perm = order_rng.permutation(len(tokens))
        sums: dict[str, float] = {}
        steps = 0
        for step, start in enumerate(range(0, len(tokens), cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            try:
                terms: dict = {}

                def loss_fn():
                    loss, parts = batch_loss(tokens[idx], labels[idx], budget_rng)
                    terms.update(parts)
                    return loss

                loss = model.graph.forward(loss_fn)
                grads = model.graph.backward()
            except NonFiniteError as e:
                raise DivergenceError(epoch, step, str(e)) from e
            if not math.isfinite(loss.item()):
                raise DivergenceError(epoch, step, "non-finite loss")
            clip_gradients(grads, cfg.grad_clip)
            opt.step(grads)
            sums["loss"] = sums.get("loss", 0.0) + loss.item()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v)
            steps += 1
        score, detail = select(model)
        log_fn(epoch=epoch, split="train", mode=cfg.mode, seed=cfg.seed,
               **{k: v / steps for k, v in sums.items()}, seconds=time.perf_counter() - t0)
        log_fn(epoch=epoch, split="val", mode=cfg.mode, seed=cfg.seed, selection_score=score, **detail)
        log.info("%s seed=%s epoch %d: loss %.4f val %.4f", cfg.mode, cfg.seed, epoch, sums["loss"] / steps, score)
        if not select_best or score > best_score:
            best_state, best_score, best_epoch, stale = model.state_dict(), score, epoch, 0
        else:
            stale += 1
        if best_score >= cfg.target_accuracy or (cfg.patience and stale >= cfg.patience):
            break
    return best_state, best_score, best_epoch


def _val_arrays(data: DatasetSplit) -> tuple[np.ndarray, np.ndarray]:
    return as_arrays(data.val)


def _dense_select(data: DatasetSplit):
    vt, vl = _val_arrays(data)

    def select(model):
        acc = accuracy_of(predict_logits(model, vt), vl)
        return acc, {"budget": 1.0, "accuracy": acc, "cost": 1.0}

    return select


def _budgets_select(data: DatasetSplit, budgets):
    vt, vl = _val_arrays(data)

    def select(model):
        accs, costs = [], []
        for b in budgets:
            mask = budget_mask(model, b, SOFT_KIND)
            accs.append(accuracy_of(predict_logits(model, vt, mask), vl))
            costs.append(float(mask.array.mean()))
        return float(np.mean(accs)), {"budgets": list(budgets), "accuracy": accs, "cost": costs}

    return select


def _finish(model: EncoderModel, state: dict, score: float, epoch: int, cfg: TrainConfig,
            meta: dict) -> Checkpoint:
    model.load_state_dict(state)
    return Checkpoint.from_model(model, train_config=cfg.to_dict(), best_val_accuracy=score,
                                 epoch=epoch, meta=meta)


def _meta(data: DatasetSplit, cfg: TrainConfig, extra: dict | None = None) -> dict:
    return {"seed": cfg.seed, "mode": cfg.mode, "data_seed": data.seed, "data_config": data.config,
            **(extra or {})}


# ------------------------------------------------------------------ pipelines

def train_dense(model_cfg: ModelConfig, cfg: TrainConfig, data: DatasetSplit,
                log_path: str | Path | None = None) -> Checkpoint:
    if cfg.mode != "dense":
        raise ValueError("train_dense needs mode='dense'")
    model = EncoderModel(model_cfg, seed=cfg.seed)
    log_fn = JsonlLog(log_path)

    def batch_loss(tok, lab, _rng_):
        loss = T.cross_entropy(model.logits(tok, None, _dropout_rng), lab)
        return loss, {"ce": loss.item()}

    _dropout_rng = _rng(cfg.seed, "dropout") if model_cfg.dropout else None
    state, score, epoch = _fit(model, data, cfg, batch_loss, _dense_select(data), log_fn)
    return _finish(model, state, score, epoch, cfg, _meta(data, cfg))


def init_gated(model_cfg: ModelConfig, cfg: TrainConfig,
               warm_start: Checkpoint | None = None) -> EncoderModel:
    """Fresh gated model; with ``warm_start`` the body weights are copied verbatim."""
    model = EncoderModel(model_cfg, seed=cfg.seed)
    if warm_start is not None:
        if warm_start.model_config != model_cfg:
            raise ValueError("warm-start checkpoint was trained with a different model config")
        body = {k: v for k, v in warm_start.params.items() if not k.startswith("gate.")}
        model.load_state_dict(body)
    model.attach_gates(GateParams.init(model_cfg.layers, model_cfg.heads, _rng(cfg.seed, "gates")))
    return model


def _gated_batch_loss(model: EncoderModel, cfg: TrainConfig, fixed: float | None):
    dropout_rng = _rng(cfg.seed, "dropout") if model.config.dropout else None

    def batch_loss(tok, lab, rng):
        b = fixed if fixed is not None else sample_budget(rng, cfg.budget_lo, cfg.budget_hi)
        z = soft_gates(model.gate_params, b)
        cost = estimated_cost(z)
        logits = model.logits(tok, z, dropout_rng)
        loss = budgeted_loss(logits, lab, cost, b, cfg.lam, cfg.beta)
        c = cost.item()
        return loss, {"budget": b, "cost": c, "cost_term": cfg.lam * c,
                      "violation_term": cfg.beta * max(0.0, c - b) ** 2}

    return batch_loss


def train_budgeted(model_cfg: ModelConfig, cfg: TrainConfig, data: DatasetSplit,
                   warm_start: Checkpoint | None = None,
                   log_path: str | Path | None = None) -> Checkpoint:
    if cfg.mode != "budgeted":
        raise ValueError("train_budgeted needs mode='budgeted'")
    model = init_gated(model_cfg, cfg, warm_start)
    state, score, epoch = _fit(model, data, cfg, _gated_batch_loss(model, cfg, None),
                               _budgets_select(data, CANONICAL_BUDGETS), JsonlLog(log_path))
    return _finish(model, state, score, epoch, cfg,
                   _meta(data, cfg, {"warm_start": warm_start.meta if warm_start else None}))


def train_static(model_cfg: ModelConfig, cfg: TrainConfig, data: DatasetSplit,
                 warm_start: Checkpoint | None = None,
                 log_path: str | Path | None = None) -> Checkpoint:
    if cfg.mode != "static":
        raise ValueError("train_static needs mode='static'")
    model = init_gated(model_cfg, cfg, warm_start)
    b = cfg.fixed_budget
    state, score, epoch = _fit(model, data, cfg, _gated_batch_loss(model, cfg, b),
                               _budgets_select(data, (b,)), JsonlLog(log_path))
    return _finish(model, state, score, epoch, cfg,
                   _meta(data, cfg, {"fixed_budget": b, "warm_start": warm_start.meta if warm_start else None}))


def adapt_hard(cfg: TrainConfig, budgeted: Checkpoint, data: DatasetSplit,
               log_path: str | Path | None = None, probe_budget: float = 0.5) -> Checkpoint:
    """One epoch of straight-through hard gates distilled from the frozen soft-gated teacher."""
    if cfg.mode != "hard_adapt":
        raise ValueError("adapt_hard needs mode='hard_adapt'")
    if not budgeted.gated:
        raise ValueError("hard adaptation needs a checkpoint with gate parameters")
    teacher = budgeted.build_model()
    for p in teacher.params.values():
        p.requires_grad = False
    student = budgeted.build_model()
    dropout_rng = _rng(cfg.seed, "dropout") if student.config.dropout else None

    def batch_loss(tok, lab, rng):
        b = sample_budget(rng, cfg.budget_lo, cfg.budget_hi)
        teacher_logits = teacher.infer_logits(tok, soft_gates(teacher.gate_params, b))
        logits = student.logits(tok, straight_through_gates(student.gate_params, b), dropout_rng)
        loss = distill_loss(logits, teacher_logits, lab, cfg.alpha, cfg.temperature)
        return loss, {"budget": b}

    vt, vl = _val_arrays(data)

    def select(model):
        acc = accuracy_of(predict_logits(model, vt, budget_mask(model, probe_budget, HARD_KIND)), vl)
        return acc, {"budget": probe_budget, "kind": HARD_KIND, "accuracy": acc}

    pre_acc = select(student)[0]
    log_fn = JsonlLog(log_path)
    log_fn(epoch=0, split="val", mode=cfg.mode, seed=cfg.seed, selection_score=pre_acc,
           budget=probe_budget, kind=HARD_KIND, accuracy=pre_acc)
    state, score, epoch = _fit(student, data, replace(cfg, patience=0), batch_loss, select, log_fn,
                               epochs=1, select_best=False)
    return _finish(student, state, score, epoch, cfg,
                   _meta(data, cfg, {"teacher": budgeted.meta, "hard_accuracy_before": pre_acc,
                                     "probe_budget": probe_budget}))
