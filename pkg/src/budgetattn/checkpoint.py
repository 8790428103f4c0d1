"""Checkpoint container.

Layout::

    budgetattn-checkpoint
    format_version: 1
    <key>: <json value>            (one line per header field, fixed order)
    param: <name> <d0>x<d1>...     (one line per block, in block order)
    end_header
    <raw float64 little-endian blocks, concatenated in the order listed>

Header values are JSON with sorted keys, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gating import GateParams
from .model import EncoderModel, ModelConfig
from .tensor import Tensor

MAGIC = "budgetattn-checkpoint"
FORMAT_VERSION = 1
_FIELDS = ("model_config", "gate_tau", "gate_eps", "train_config", "best_val_accuracy", "epoch", "meta")


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    train_config: dict = field(default_factory=dict)
    best_val_accuracy: float | None = None
    epoch: int = 0
    gate_tau: float | None = None
    gate_eps: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def gated(self) -> bool:
        return "gate.a" in self.params

    @classmethod
    def from_model(cls, model: EncoderModel, **kw) -> "Checkpoint":
        g = model.gate_params
        return cls(model.config, model.state_dict(),
                   gate_tau=g.tau if g else None, gate_eps=g.eps if g else None, **kw)

    def build_model(self) -> EncoderModel:
        model = EncoderModel(self.model_config, seed=0, gated=False)
        body = {k: v for k, v in self.params.items() if not k.startswith("gate.")}
        model.load_state_dict(body)
        if self.gated:
            model.attach_gates(GateParams(Tensor(self.params["gate.a"].copy(), True),
                                          Tensor(self.params["gate.s"].copy(), True),
                                          self.gate_tau if self.gate_tau is not None else 1.0,
                                          self.gate_eps if self.gate_eps is not None else 1e-4))
        return model


def _dumps(v) -> str:
    return json.dumps(v, sort_keys=True, separators=(",", ":"))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    header = [MAGIC, f"format_version: {FORMAT_VERSION}"]
    values = {
        "model_config": ckpt.model_config.to_dict(),
        "gate_tau": ckpt.gate_tau,
        "gate_eps": ckpt.gate_eps,
        "train_config": ckpt.train_config,
        "best_val_accuracy": ckpt.best_val_accuracy,
        "epoch": ckpt.epoch,
        "meta": ckpt.meta,
    }
    header += [f"{k}: {_dumps(values[k])}" for k in _FIELDS]
    names = sorted(ckpt.params)
    for name in names:
        if any(c.isspace() for c in name):
            raise CheckpointFormatError(f"parameter name {name!r} contains whitespace")
        shape = "x".join(str(n) for n in ckpt.params[name].shape) or "scalar"
        header.append(f"param: {name} {shape}")
    header.append("end_header")
    blob = b"".join(np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes() for n in names)
    Path(path).write_bytes(("\n".join(header) + "\n").encode("utf-8") + blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend_header\n")
    if end < 0:
        raise CheckpointFormatError(f"{path}: missing end_header line")
    lines = raw[:end].decode("utf-8").split("\n")
    if lines[0] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic line)")
    version_line = lines[1].split(": ", 1)
    if version_line[0] != "format_version" or int(version_line[1]) != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version line {lines[1]!r}")
    values: dict = {}
    blocks: list[tuple[str, tuple[int, ...]]] = []
    for lineno, line in enumerate(lines[2:], start=3):
        key, sep, rest = line.partition(": ")
        if not sep:
            raise CheckpointFormatError(f"{path}:{lineno}: malformed header line {line!r}")
        if key == "param":
            name, shape = rest.split(" ")
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            blocks.append((name, dims))
        elif key in _FIELDS:
            values[key] = json.loads(rest)
        else:
            raise CheckpointFormatError(f"{path}:{lineno}: unknown header field {key!r}")
    missing = set(_FIELDS) - set(values)
    if missing:
        raise CheckpointFormatError(f"{path}: header lacks {sorted(missing)}")
    offset = end + len(b"\nend_header\n")
    params = {}
    for name, dims in blocks:
        count = int(np.prod(dims)) if dims else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise CheckpointFormatError(f"{path}: truncated data for block {name}")
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(dims)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - offset} trailing bytes after last block")
    return Checkpoint(ModelConfig.from_dict(values["model_config"]), params, values["train_config"],
                      values["best_val_accuracy"], values["epoch"], values["gate_tau"],
                      values["gate_eps"], values["meta"])
