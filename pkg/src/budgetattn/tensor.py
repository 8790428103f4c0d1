"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Operations record onto the tape of the graph whose ``forward`` is running.
Outside ``Graph.forward`` nothing is recorded, which is the inference path.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_active_tapes: list[list] = []


class AutodiffError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    # a sum is non-finite whenever any element is; cheaper than an elementwise mask
    if not np.isfinite(np.sum(out)):
        if not np.isfinite(out).all():
            raise NonFiniteError(op)
    needs = any(p.requires_grad for p in parents)
    t = Tensor(out, requires_grad=needs)
    if needs and _active_tapes:
        _active_tapes[-1].append((t, backward))
    return t


def _accum(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add ``g`` into ``t.grad``; ``fresh`` marks ``g`` as a private temporary safe to adopt."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if fresh and g.shape == t.shape and g.flags.writeable and g.base is None:
            t.grad = g
        else:
            t.grad = np.array(np.broadcast_to(g, t.shape), dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Graph:
    """Parameter registry plus the tape of the most recent forward pass."""

    def __init__(self):
        self.parameters: dict[str, Tensor] = {}
        self.gradients: dict[str, np.ndarray] = {}
        self._tape: list | None = None
        self._output: Tensor | None = None
        self._spent = False

    def register(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self.parameters:
            raise KeyError(f"parameter '{name}' already registered")
        t = value if isinstance(value, Tensor) else Tensor(np.array(value, dtype=np.float64))
        t.requires_grad = trainable
        self.parameters[name] = t
        return t

    def forward(self, fn: Callable[..., Tensor], *args, **kwargs) -> Tensor:
        tape: list = []
        _active_tapes.append(tape)
        try:
            out = fn(*args, **kwargs)
        finally:
            _active_tapes.pop()
        self._tape, self._output, self._spent = tape, as_tensor(out), False
        return self._output

    def backward(self) -> dict[str, np.ndarray]:
        if self._tape is None:
            raise AutodiffError("backward() called before forward()")
        if self._spent:
            raise AutodiffError("backward() already run for this forward pass")
        out = self._output
        if out.data.size != 1:
            raise AutodiffError(f"backward() needs a scalar output, got shape {out.shape}")
        for p in self.parameters.values():
            p.grad = None
        out.grad = np.ones_like(out.data)
        for node, fn in reversed(self._tape):
            if node.grad is not None:
                fn(node.grad)
                if node is not out:
                    node.grad = None
        self.gradients = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in self.parameters.items()
        }
        self._spent = True
        self._tape = []
        return self.gradients


def forward(graph: Graph, fn: Callable[..., Tensor], *args, **kwargs) -> Tensor:
    return graph.forward(fn, *args, **kwargs)


def backward(graph: Graph) -> dict[str, np.ndarray]:
    return graph.backward()


def grad_check(graph: Graph, loss_fn: Callable[[], Tensor], param: str,
               step: float = 1e-5, floor: float = 1e-6) -> float:
    """Max elementwise relative error between autodiff and central differences.

    Relative error is ``|ad - fd| / max(|ad|, |fd|, floor)``; ``floor`` keeps
    entries whose true gradient is ~0 from dividing noise by noise.
    """
    if step <= 0 or not math.isfinite(step) or step < 1e-12:
        raise ValueError(f"finite-difference step {step!r} underflows")
    p = graph.parameters[param]
    graph.forward(loss_fn)
    ad = graph.backward()[param].copy()
    fd = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn().item()
        flat[i] = orig - step
        down = loss_fn().item()
        flat[i] = orig
        fd.reshape(-1)[i] = (up - down) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), floor)
    return float(np.max(np.abs(ad - fd) / denom)) if ad.size else 0.0


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape), fresh=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape), fresh=True)

    return _record("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record("div", a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: _accum(a, -g))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record("square", a.data * a.data, (a,), lambda g: _accum(a, 2.0 * a.data * g))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: _accum(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _record("log", out, (a,), lambda g: _accum(a, g / a.data))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record("sigmoid", out, (a,), lambda g: _accum(a, g * out * (1.0 - out)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _record("softplus", out, (a,), lambda g: _accum(a, g * _sigmoid(a.data)))


def logit(p) -> Tensor:
    p = as_tensor(p)
    with np.errstate(divide="ignore"):
        out = np.log(p.data) - np.log1p(-p.data)
    return _record("logit", out, (p,), lambda g: _accum(p, g / (p.data * (1.0 - p.data))))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: _accum(a, g * (1.0 - out * out)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _record("relu", out, (a,), lambda g: _accum(a, g * (a.data > 0)))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU; smooth, so finite differences stay accurate."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner), fresh=True)

    return _record("gelu", out, (a,), bw)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


def straight_through(soft, hard_values: np.ndarray) -> Tensor:
    """Forward returns ``hard_values``; backward passes the gradient to ``soft`` unchanged."""
    soft = as_tensor(soft)
    hard_values = np.asarray(hard_values, dtype=np.float64)
    if hard_values.shape != soft.shape:
        raise ValueError(f"shape mismatch {hard_values.shape} vs {soft.shape}")
    return _record("straight_through", hard_values.copy(), (soft,), lambda g: _accum(soft, g))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape), fresh=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape), fresh=True)

    return _record("matmul", np.matmul(a.data, b.data), (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis, fused for speed."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents.append(b)
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            _accum(w, x2.T @ g2, fresh=True)
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _record("linear", out, parents, bw)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def transpose(a, axes: Iterable[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: _accum(a, g.transpose(inv)))


def index(a, key) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(a, full)

    return _record("index", np.array(a.data[key], dtype=np.float64), (a,), bw)


def embedding(weight, ids: np.ndarray) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of {weight.shape[0]}")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accum(weight, full)

    return _record("embedding", weight.data[ids], (weight,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, part in zip(ts, np.split(g, sizes, axis=axis)):
            _accum(t, part)

    return _record("concat", np.concatenate([t.data for t in ts], axis=axis), ts, bw)


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _record("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    if n == 0:
        raise ValueError("mean of an empty tensor")

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _record("mean", np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def maximum0(a) -> Tensor:
    """max(a, 0); alias kept separate from relu for loss code readability."""
    return relu(a)


# ---------------------------------------------------------------- fused NN ops

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = _softmax(a.data, axis)

    def bw(g):
        _accum(a, out * (g - np.sum(g * out, axis=axis, keepdims=True)), fresh=True)

    return _record("softmax", out, (a,), bw)


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = _log_softmax(a.data, axis)

    def bw(g):
        _accum(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _record("log_softmax", out, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            d = x.shape[-1]
            _accum(x, rstd / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                                  - xhat * (gx * xhat).sum(axis=-1, keepdims=True)), fresh=True)

    return _record("layer_norm", out, (x, gamma, beta), bw)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("cross_entropy on an empty batch")
    lsm = _log_softmax(logits.data, -1)
    rows = np.arange(n)
    out = -lsm[rows, labels].mean()

    def bw(g):
        d = np.exp(lsm)
        d[rows, labels] -= 1.0
        _accum(logits, d * (g / n))

    return _record("cross_entropy", np.asarray(out), (logits,), bw)


def attention(q, k, v, bias: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(dh) + bias) v over the last two axes, fused."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    scores *= scale
    if bias is not None:
        scores += bias
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores, out=scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = np.matmul(probs, v.data)

    def bw(g):
        if v.requires_grad:
            _accum(v, np.matmul(np.swapaxes(probs, -1, -2), g), fresh=True)
        dp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        dp -= (dp * probs).sum(axis=-1, keepdims=True)
        dp *= probs
        dp *= scale
        if q.requires_grad:
            _accum(q, np.matmul(dp, k.data), fresh=True)
        if k.requires_grad:
            _accum(k, np.matmul(np.swapaxes(dp, -1, -2), q.data), fresh=True)

    return _record("attention", out, (q, k, v), bw)
