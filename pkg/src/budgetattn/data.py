"""Synthetic marked-token task and a word-level CSV text-classification loader."""

from __future__ import annotations

import csv
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PAD = 0
MARKER = 1
UNK = 1  # CSV vocabularies have no marker, so id 1 is the unknown word
FILLER_COUNT = 16


@dataclass
class MarkedTaskConfig:
    seq_len: int = 64
    n_values: int = 8
    n_train: int = 4096
    n_val: int = 1024
    n_test: int = 0

    @property
    def vocab_size(self) -> int:
        return marked_vocab_size(self.n_values)


@dataclass
class Example:
    tokens: list[int]
    label: int


@dataclass
class DatasetSplit:
    train: list[Example]
    val: list[Example]
    test: list[Example] = field(default_factory=list)
    seed: int = 0
    config: dict = field(default_factory=dict)
    vocab: list[str] | None = None
    num_classes: int = 2

    @property
    def vocab_size(self) -> int:
        if self.vocab is not None:
            return len(self.vocab)
        return marked_vocab_size(int(self.config["n_values"]))

    def part(self, name: str) -> list[Example]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def marked_vocab_size(n_values: int) -> int:
    return 2 + n_values + FILLER_COUNT


def value_token(i: int) -> int:
    """Token id of value ``i`` (0-based)."""
    return 2 + i


def filler_base(n_values: int) -> int:
    return 2 + n_values


def as_arrays(examples: list[Example]) -> tuple[np.ndarray, np.ndarray]:
    if not examples:
        raise ValueError("empty split")
    tokens = np.array([e.tokens for e in examples], dtype=np.int64)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return tokens, labels


# ------------------------------------------------------------------ synthetic

def make_marked_example(seq_len: int, positions: tuple[int, int], values: tuple[int, int],
                        fillers, n_values: int) -> Example:
    """Place MARKER at both positions, the value tokens right after, fillers elsewhere."""
    p1, p2 = positions
    if not (0 <= p1 and p1 + 1 < p2 and p2 + 1 < seq_len):
        raise ValueError(f"marker positions {positions} invalid for seq_len={seq_len}")
    tokens = [filler_base(n_values) + int(f) for f in fillers]
    if len(tokens) != seq_len:
        raise ValueError("need one filler per position")
    tokens[p1], tokens[p2] = MARKER, MARKER
    tokens[p1 + 1], tokens[p2 + 1] = value_token(values[0]), value_token(values[1])
    return Example(tokens, int(values[0] == values[1]))


def relabel(tokens: list[int], n_values: int) -> int:
    """Reference labeller: 1 iff the tokens after the two markers are equal."""
    marks = [i for i, t in enumerate(tokens) if t == MARKER]
    if len(marks) != 2:
        raise ValueError(f"expected two markers, found {len(marks)}")
    return int(tokens[marks[0] + 1] == tokens[marks[1] + 1])


def gen_marked(seed: int, n_examples: int, seq_len: int = 64, n_values: int = 8) -> list[Example]:
    """Examples alternate match / mismatch, starting with a match."""
    if seq_len < 4:
        raise ValueError(f"seq_len={seq_len} too small for two marker-value pairs (need >= 4)")
    if n_values < 2:
        raise ValueError("n_values must be at least 2")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_examples):
        # p1 in [0, L-4], p2 in [p1+2, L-2]
        p1 = int(rng.integers(0, seq_len - 3))
        p2 = int(rng.integers(p1 + 2, seq_len - 1))
        v1 = int(rng.integers(0, n_values))
        if i % 2 == 0:
            v2 = v1
        else:
            v2 = int(rng.integers(0, n_values - 1))
            v2 += v2 >= v1
        fillers = rng.integers(0, FILLER_COUNT, size=seq_len)
        out.append(make_marked_example(seq_len, (p1, p2), (v1, v2), fillers, n_values))
    return out


def make_marked_split(seed: int, cfg: MarkedTaskConfig) -> DatasetSplit:
    """Train, val and test come from one generated stream, so they share no example index."""
    total = cfg.n_train + cfg.n_val + cfg.n_test
    examples = gen_marked(seed, total, cfg.seq_len, cfg.n_values)
    # shuffle so each split keeps the alternating balance approximately; rebalance exactly below
    order = np.random.default_rng([seed, 1]).permutation(total)
    pos = [examples[i] for i in order if examples[i].label == 1]
    neg = [examples[i] for i in order if examples[i].label == 0]

    def take(n):
        # an odd example goes to whichever class has more left, so pools never run dry
        half = n // 2 + (n % 2 if len(pos) > len(neg) else 0)
        part = [pos.pop() for _ in range(half)] + [neg.pop() for _ in range(n - half)]
        perm = np.random.default_rng([seed, 2, n]).permutation(n)
        return [part[i] for i in perm]

    train, val, test = take(cfg.n_train), take(cfg.n_val), take(cfg.n_test)
    return DatasetSplit(train, val, test, seed, asdict(cfg), None, 2)


# ------------------------------------------------------------------ jsonl fixtures

def write_jsonl(examples: list[Example], path: str | Path) -> None:
    with open(path, "w") as fh:
        for e in examples:
            fh.write(json.dumps({"tokens": e.tokens, "label": e.label}, separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[Example]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(Example([int(t) for t in d["tokens"]], int(d["label"])))
    return out


# ------------------------------------------------------------------ CSV text

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocabulary:
    def __init__(self, words: list[str]):
        self.words = ["<pad>", "<unk>"] + list(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def build(cls, texts: list[str], vocab_size: int) -> "Vocabulary":
        if vocab_size < 3:
            raise ValueError("vocab_size must leave room for at least one word")
        counts = Counter(w for t in texts for w in tokenize(t))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([w for w, _ in ranked[: vocab_size - 2]])

    def encode(self, text: str, seq_len: int) -> list[int]:
        ids = [self.index.get(w, UNK) for w in tokenize(text)][:seq_len]
        return ids + [PAD] * (seq_len - len(ids))

    def decode(self, ids: list[int]) -> list[str]:
        return [self.words[i] for i in ids if i != PAD]


def _read_label_text(path: str | Path) -> list[tuple[str, str]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and [c.strip().lower() for c in row[:2]] == ["label", "text"]:
                continue
            if len(row) < 2 or not row[0].strip():
                raise ValueError(f"{path}:{lineno}: expected 'label,text' columns, got {row!r}")
            rows.append((row[0].strip(), " ".join(row[1:])))
    return rows


def _label_ids(labels: list[str]) -> dict[str, int]:
    uniq = set(labels)
    try:
        ordered = sorted(uniq, key=float)
    except ValueError:
        ordered = sorted(uniq)
    return {lab: i for i, lab in enumerate(ordered)}


def load_text_csv(path: str | Path, vocab_size: int, seq_len: int, n_val: int,
                  test_path: str | Path | None = None, n_train: int | None = None,
                  n_test: int | None = None, seed: int = 0) -> DatasetSplit:
    """Word-level classification data from ``label,text`` CSV files.

    The training file is shuffled with ``seed``; validation rows come from its
    head and the vocabulary from the remaining training rows only.
    """
    rows = _read_label_text(path)
    order = np.random.default_rng(seed).permutation(len(rows))
    rows = [rows[i] for i in order]
    val_rows, train_rows = rows[:n_val], rows[n_val:]
    if n_train is not None:
        train_rows = train_rows[:n_train]
    test_rows = _read_label_text(test_path) if test_path else []
    if n_test is not None:
        test_rows = test_rows[:n_test]
    if not train_rows:
        raise ValueError("empty training split")
    if n_val and not val_rows:
        raise ValueError("empty validation split")
    labels = _label_ids([r[0] for r in train_rows + val_rows + test_rows])
    vocab = Vocabulary.build([t for _, t in train_rows], vocab_size)

    def encode(part):
        return [Example(vocab.encode(text, seq_len), labels[lab]) for lab, text in part]

    cfg = {"path": str(path), "test_path": str(test_path) if test_path else None,
           "vocab_size": vocab_size, "seq_len": seq_len, "n_val": n_val,
           "n_train": n_train, "n_test": n_test, "labels": list(labels)}
    return DatasetSplit(encode(train_rows), encode(val_rows), encode(test_rows), seed, cfg,
                        vocab.words, len(labels))
