"""Gated transformer encoder classifier.

Every head output is scaled by its gate before the output projection. The
hard-skip path computes projections, attention and output-projection rows
only for heads whose binary gate is 1.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .gating import GateParams, HeadMask
from .tensor import Graph, Tensor

PAD_ID = 0
_NEG = -1e30


@dataclass
class ModelConfig:
    vocab_size: int = 26
    seq_len: int = 64
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 256
    num_classes: int = 2
    dropout: float = 0.0

    def __post_init__(self):
        for f in ("vocab_size", "seq_len", "hidden", "layers", "heads", "ffn_dim", "num_classes"):
            if int(getattr(self, f)) < 1:
                raise ValueError(f"model.{f} must be positive")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class OpCounter(Counter):
    """Multiply-accumulate tallies for attention arithmetic, keyed by stage."""

    def attention_macs(self) -> int:
        return sum(v for k, v in self.items() if k in ("qkv", "scores", "context", "out_proj"))


class EncoderModel:
    def __init__(self, config: ModelConfig, seed: int = 0, gated: bool = False,
                 gate_tau: float = 1.0, gate_eps: float = 1e-4):
        self.config = config
        self.graph = Graph()
        self.gate_params: GateParams | None = None
        rng = np.random.default_rng(seed)
        c = config
        d, f = c.hidden, c.ffn_dim
        reg = self.graph.register
        reg("emb.tok", rng.normal(0.0, 0.1, (c.vocab_size, d)))
        reg("emb.pos", rng.normal(0.0, 0.1, (c.seq_len, d)))
        for l in range(c.layers):
            p = f"layer{l}."
            reg(p + "ln1.g", np.ones(d))
            reg(p + "ln1.b", np.zeros(d))
            for name in ("q", "k", "v"):
                reg(p + f"attn.w{name}", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
                reg(p + f"attn.b{name}", np.zeros(d))
            # no output-projection bias: a fully gated-off block contributes exactly nothing
            reg(p + "attn.wo", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
            reg(p + "ln2.g", np.ones(d))
            reg(p + "ln2.b", np.zeros(d))
            reg(p + "ffn.w1", rng.normal(0.0, 1.0 / math.sqrt(d), (d, f)))
            reg(p + "ffn.b1", np.zeros(f))
            reg(p + "ffn.w2", rng.normal(0.0, 1.0 / math.sqrt(f), (f, d)))
            reg(p + "ffn.b2", np.zeros(d))
        reg("final.ln.g", np.ones(d))
        reg("final.ln.b", np.zeros(d))
        reg("head.w", rng.normal(0.0, 1.0 / math.sqrt(d), (d, c.num_classes)))
        reg("head.b", np.zeros(c.num_classes))
        if gated:
            self.attach_gates(GateParams.init(c.layers, c.heads, rng, gate_tau, gate_eps))

    # ------------------------------------------------------------ parameters

    @property
    def params(self) -> dict[str, Tensor]:
        return self.graph.parameters

    def attach_gates(self, gates: GateParams) -> None:
        if gates.shape != (self.config.layers, self.config.heads):
            raise ValueError(f"gate shape {gates.shape} does not match model "
                             f"({self.config.layers}, {self.config.heads})")
        self.graph.parameters.pop("gate.a", None)
        self.graph.parameters.pop("gate.s", None)
        self.gate_params = gates
        self.graph.register("gate.a", gates.a)
        self.graph.register("gate.s", gates.s)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if k not in self.params:
                continue
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data[...] = v

    def copy(self) -> "EncoderModel":
        m = EncoderModel.__new__(EncoderModel)
        m.config = self.config
        m.graph = Graph()
        m.gate_params = None
        for k, v in self.params.items():
            if k.startswith("gate."):
                continue
            m.graph.register(k, v.data.copy(), trainable=v.requires_grad)
        if self.gate_params is not None:
            g = self.gate_params
            m.attach_gates(GateParams(Tensor(g.a.data.copy(), True), Tensor(g.s.data.copy(), True), g.tau, g.eps))
        return m

    def num_parameters(self) -> int:
        return sum(v.data.size for v in self.params.values())

    # ------------------------------------------------------------ forward

    def _check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"token batch must be 2-D (batch, seq), got shape {tokens.shape}")
        if tokens.shape[0] == 0:
            raise ValueError("empty token batch")
        if tokens.shape[1] > self.config.seq_len or tokens.shape[1] == 0:
            raise ValueError(f"sequence length {tokens.shape[1]} outside [1, {self.config.seq_len}]")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError(f"token id outside vocabulary of {self.config.vocab_size}")
        return tokens.astype(np.int64, copy=False)

    def _pad_info(self, tokens: np.ndarray):
        keep = tokens != PAD_ID
        if keep.all():
            return None, None
        bias = np.where(keep, 0.0, _NEG)[:, None, None, :]
        weights = keep.astype(np.float64)
        weights /= np.maximum(weights.sum(axis=1, keepdims=True), 1.0)
        return bias, weights

    def _embed(self, tokens: np.ndarray) -> Tensor:
        p = self.params
        return T.add(T.embedding(p["emb.tok"], tokens), T.index(p["emb.pos"], slice(0, tokens.shape[1])))

    def _dropout(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        rate = self.config.dropout
        if rng is None or rate == 0.0:
            return x
        keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
        return T.mul(x, keep)

    def _attention(self, l: int, x: Tensor, gates: Tensor | None, bias) -> Tensor:
        p, c = self.params, self.config
        pre = f"layer{l}.attn."
        b, n, d = x.shape
        h, dh = c.heads, c.head_dim

        def split(t):
            return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

        q = split(T.linear(x, p[pre + "wq"], p[pre + "bq"]))
        k = split(T.linear(x, p[pre + "wk"], p[pre + "bk"]))
        v = split(T.linear(x, p[pre + "wv"], p[pre + "bv"]))
        heads = T.attention(q, k, v, bias)
        if gates is not None:
            heads = T.mul(heads, T.reshape(T.index(gates, l), (1, h, 1, 1)))
        merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, n, d))
        return T.linear(merged, p[pre + "wo"])

    def _body(self, tokens: np.ndarray, gates: Tensor | None,
              rng: np.random.Generator | None = None) -> Tensor:
        p, c = self.params, self.config
        bias, pool = self._pad_info(tokens)
        x = self._embed(tokens)
        for l in range(c.layers):
            pre = f"layer{l}."
            a = self._attention(l, T.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), gates, bias)
            x = T.add(x, self._dropout(a, rng))
            hdn = T.gelu(T.linear(T.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"]),
                                  p[pre + "ffn.w1"], p[pre + "ffn.b1"]))
            x = T.add(x, self._dropout(T.linear(hdn, p[pre + "ffn.w2"], p[pre + "ffn.b2"]), rng))
        x = T.layer_norm(x, p["final.ln.g"], p["final.ln.b"])
        pooled = T.mean(x, axis=1) if pool is None else T.sum_(T.mul(x, pool[:, :, None]), axis=1)
        return T.linear(pooled, p["head.w"], p["head.b"])

    def logits(self, tokens, gates: Tensor | HeadMask | None = None,
               rng: np.random.Generator | None = None) -> Tensor:
        """Differentiable logits; ``gates`` is an L x H tensor or mask (None means dense)."""
        tokens = self._check_tokens(tokens)
        if isinstance(gates, HeadMask):
            gates = gates.values
        if gates is not None and gates.shape != (self.config.layers, self.config.heads):
            raise ValueError(f"mask shape {gates.shape} != ({self.config.layers}, {self.config.heads})")
        return self._body(tokens, gates, rng)

    # ------------------------------------------------------------ tape-free inference

    def infer_logits(self, tokens, gates: HeadMask | np.ndarray | None = None, skip: bool = False,
                     counter: OpCounter | None = None) -> np.ndarray:
        """Plain-numpy logits, the path used for latency measurement.

        ``gates=None`` runs every head ungated. With ``skip`` the gates must be
        binary and inactive heads are never computed; otherwise all heads are
        computed and scaled by their gate.
        """
        tokens = self._check_tokens(tokens)
        c = self.config
        values = None
        if gates is not None:
            values = gates.array if isinstance(gates, HeadMask) else np.asarray(gates, dtype=np.float64)
            if values.shape != (c.layers, c.heads):
                raise ValueError(f"mask shape {values.shape} != ({c.layers}, {c.heads})")
        if skip and (values is None or not np.all((values == 0.0) | (values == 1.0))):
            raise ValueError("hard-skip needs a binary mask")
        P = {k: v.data for k, v in self.params.items()}
        bias, pool = self._pad_info(tokens)
        n = tokens.shape[1]
        dh = c.head_dim
        x = P["emb.tok"][tokens] + P["emb.pos"][:n]
        for l in range(c.layers):
            pre = f"layer{l}."
            if skip:
                active, scale = np.flatnonzero(values[l]), None
            else:
                active, scale = np.arange(c.heads), (None if values is None else values[l])
            if active.size:
                cols = (active[:, None] * dh + np.arange(dh)).reshape(-1) if skip else slice(None)
                x = x + _attention_np(_ln(x, P[pre + "ln1.g"], P[pre + "ln1.b"]), P, pre + "attn.",
                                      cols, active.size, dh, bias, scale, counter)
            hdn = _gelu(_ln(x, P[pre + "ln2.g"], P[pre + "ln2.b"]) @ P[pre + "ffn.w1"] + P[pre + "ffn.b1"])
            x = x + (hdn @ P[pre + "ffn.w2"] + P[pre + "ffn.b2"])
        x = _ln(x, P["final.ln.g"], P["final.ln.b"])
        pooled = x.mean(axis=1) if pool is None else (x * pool[:, :, None]).sum(axis=1)
        return pooled @ P["head.w"] + P["head.b"]

    def hard_skip_logits(self, tokens, mask: HeadMask | np.ndarray,
                         counter: OpCounter | None = None) -> np.ndarray:
        return self.infer_logits(tokens, mask, skip=True, counter=counter)


def _ln(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + T.LAYER_NORM_EPS) * g + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * (x * x * x))))


def _attention_np(x, P, pre, cols, k, dh, bias, scale, counter):
    b, n, d = x.shape
    x2 = x.reshape(-1, d)
    width = k * dh

    def proj(name):
        out = x2 @ P[pre + "w" + name][:, cols] + P[pre + "b" + name][cols]
        return out.reshape(b, n, k, dh).transpose(0, 2, 1, 3)

    q, kk, v = proj("q"), proj("k"), proj("v")
    scores = q @ kk.transpose(0, 1, 3, 2)
    scores *= 1.0 / math.sqrt(dh)
    if bias is not None:
        scores += bias
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores, out=scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    heads = probs @ v
    if scale is not None:
        heads = heads * scale.reshape(1, k, 1, 1)
    merged = heads.transpose(0, 2, 1, 3).reshape(b * n, width)
    out = merged @ P[pre + "wo"][cols, :]
    if counter is not None:
        counter["qkv"] += 3 * b * n * d * width
        counter["scores"] += b * k * n * n * dh
        counter["context"] += b * k * n * n * dh
        counter["out_proj"] += b * n * width * d
        counter["active_heads"] += k
    return out.reshape(b, n, d)


def forward_dense(model: EncoderModel, tokens) -> np.ndarray:
    return model.logits(tokens, None).data


def forward_gated(model: EncoderModel, tokens, mask: HeadMask) -> np.ndarray:
    return model.logits(tokens, mask).data


def forward_hard_skip(model: EncoderModel, tokens, mask: HeadMask,
                      counter: OpCounter | None = None) -> np.ndarray:
    return model.hard_skip_logits(tokens, mask, counter)
