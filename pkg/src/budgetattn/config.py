"""Run configuration files: INI sections of ``key = value`` lines.

Recognised sections are ``[run]``, ``[data]``, ``[model]``, ``[train]`` and
per-stage overrides ``[train.<stage>]`` that patch the base ``[train]`` values.
Unknown sections and keys are errors, reported with their line number.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import MarkedTaskConfig
from .model import ModelConfig
from .training import TrainConfig

TASKS = ("marked", "csv")
STAGES = ("dense", "budgeted", "scratch", "static", "hard_adapt")
STAGE_MODE = {"dense": "dense", "budgeted": "budgeted", "scratch": "budgeted",
              "static": "static", "hard_adapt": "hard_adapt"}


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = f"{path or '<config>'}:{line}: " if line else f"{path or '<config>'}: "
        super().__init__(where + message)
        self.path, self.line = path, line


@dataclass
class CsvTaskConfig:
    path: str = ""
    test_path: str = ""
    vocab_size: int = 20000
    seq_len: int = 64
    n_val: int = 1000
    n_train: int = 0
    n_test: int = 0


@dataclass
class RunSettings:
    task: str = "marked"
    out_dir: str = "runs/default"
    seeds: tuple[int, ...] = (7, 13, 21)
    static_budgets: tuple[float, ...] = (0.25, 0.50)
    sweep: str = "0.10:1.00:0.05"
    prune_budgets: tuple[float, ...] = (0.25, 0.50, 0.75)
    stability_budgets: tuple[float, ...] = (0.25, 0.75)
    bench_budget: float = 0.5
    bench_examples: int = 2000
    bench_warmup: int = 2
    bench_repeats: int = 5
    bench_batch_size: int = 64

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if self.bench_repeats < 1 or self.bench_warmup < 0:
            raise ValueError("bench_repeats must be >= 1 and bench_warmup >= 0")


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    data: MarkedTaskConfig | CsvTaskConfig = field(default_factory=MarkedTaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stages: dict[str, dict] = field(default_factory=dict)

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.run.seeds

    def train_config(self, stage: str, seed: int, **extra) -> TrainConfig:
        """Base training values patched by the ``[train.<stage>]`` overrides."""
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
        values = dataclasses.asdict(self.train)
        values.update(self.stages.get(stage, {}))
        values.update(extra)
        values.update(mode=STAGE_MODE[stage], seed=seed)
        return TrainConfig(**values)

    def to_dict(self) -> dict:
        d = {name: dataclasses.asdict(getattr(self, name)) for name in ("run", "data", "model", "train")}
        d["stages"] = {k: dict(v) for k, v in self.stages.items()}
        return d


# ------------------------------------------------------------------ value coercion

def _kind(default):
    if isinstance(default, bool):
        return bool
    if isinstance(default, tuple):
        return (tuple, type(default[0]) if default else float)
    return type(default)


def _coerce(text: str, kind):
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if isinstance(kind, tuple):
        inner = kind[1]
        return tuple(inner(p.strip()) for p in text.split(",") if p.strip())
    return kind(text)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


# ------------------------------------------------------------------ parsing

_SECTION = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    where: dict[tuple[str, str | None], int] = {}
    section = None
    for no, line in enumerate(text.splitlines(), 1):
        if line.lstrip().startswith(("#", ";")):
            continue
        m = _SECTION.match(line)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), no)
            continue
        m = _KEY.match(line)
        if m and section is not None and not line[:1].isspace():
            where.setdefault((section, m.group(1).strip().lower()), no)
    return where


def _section_values(parser, section: str, cls, lines, path, *, exclude=()) -> dict:
    defaults = _defaults(cls)
    out = {}
    for key, raw in parser.items(section):
        line = lines.get((section, key))
        if key not in defaults or key in exclude:
            raise ConfigError(f"unknown key {key!r} in [{section}]", path, line)
        try:
            out[key] = _coerce(raw.strip(), _kind(defaults[key]))
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}", path, line) from None
    return out


def _build(cls, values: dict, section: str, lines, path):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}]: {exc}", path, lines.get((section, None))) from None


def parse_config(text: str, path: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__",
                                       inline_comment_prefixes=("#",))
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any [section]", path, exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", path, exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", path, exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line (expected key = value)", path, line) from None
    lines = _line_index(text)

    for section in parser.sections():
        ok = section in ("run", "data", "model", "train") or (
            section.startswith("train.") and section[6:] in STAGES)
        if not ok:
            raise ConfigError(f"unknown section [{section}]", path, lines.get((section, None)))

    run_vals = _section_values(parser, "run", RunSettings, lines, path) if parser.has_section("run") else {}
    run = _build(RunSettings, run_vals, "run", lines, path)
    data_cls = MarkedTaskConfig if run.task == "marked" else CsvTaskConfig
    data_vals = _section_values(parser, "data", data_cls, lines, path) if parser.has_section("data") else {}
    data = _build(data_cls, data_vals, "data", lines, path)
    model_vals = _section_values(parser, "model", ModelConfig, lines, path) if parser.has_section("model") else {}
    model = _build(ModelConfig, model_vals, "model", lines, path)
    train_vals = (_section_values(parser, "train", TrainConfig, lines, path, exclude=("mode", "seed"))
                  if parser.has_section("train") else {})
    train = _build(TrainConfig, train_vals, "train", lines, path)

    stages = {}
    for stage in STAGES:
        name = f"train.{stage}"
        if parser.has_section(name):
            over = _section_values(parser, name, TrainConfig, lines, path, exclude=("mode", "seed"))
            merged = dataclasses.asdict(train) | over | {"mode": STAGE_MODE[stage]}
            _build(TrainConfig, merged, name, lines, path)
            stages[stage] = over
    return RunConfig(run, data, model, train, stages)


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config file not found", str(path))
    return parse_config(p.read_text(), str(path))


def dump_config(cfg: RunConfig) -> str:
    """Serialize every field explicitly, so the text fully determines the run."""
    out = []

    def section(name, values: dict):
        out.append(f"[{name}]")
        out.extend(f"{k} = {_format(v)}" for k, v in values.items())
        out.append("")

    section("run", dataclasses.asdict(cfg.run))
    section("data", dataclasses.asdict(cfg.data))
    section("model", dataclasses.asdict(cfg.model))
    section("train", {k: v for k, v in dataclasses.asdict(cfg.train).items() if k not in ("mode", "seed")})
    for stage in STAGES:
        if stage in cfg.stages:
            section(f"train.{stage}", cfg.stages[stage])
    return "\n".join(out)
