"""Run configuration: every tunable as a namespaced ``key=value`` entry.

Config files hold sorted ``key=value`` lines; blank lines and ``#``
comments are ignored. Command-line ``--set key=value`` overrides are applied
after the file, so flags win.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .byol import AugmentationConfig
from .errors import ConfigInvalid
from .model import ModelConfig
from .synth import GeneratorConfig
from .training import PretrainConfig, TrainConfig


@dataclass
class Paths:
    dataset: str = "data/cohort.jsonl"
    vocab: str = "data/vocab.tsv"
    checkpoint: str = "runs/model.ckpt"
    out_dir: str = "runs"


@dataclass
class SplitConfig:
    ratios: tuple[float, ...] = (0.6, 0.1, 0.3)
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    gen: GeneratorConfig = field(default_factory=GeneratorConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    paths: Paths = field(default_factory=Paths)
    seeds: tuple[int, ...] = (0, 1, 2)

    # ------------------------------------------------------------ flat view

    def to_flat(self) -> dict[str, object]:
        return _flatten(self, "")

    def set(self, key: str, raw: str) -> None:
        *path, name = key.split(".")
        obj = self
        for part in path:
            if not dataclasses.is_dataclass(obj) or part not in _field_names(obj):
                raise ConfigInvalid(f"unknown config key {key!r}")
            obj = getattr(obj, part)
        if not dataclasses.is_dataclass(obj) or name not in _field_names(obj):
            raise ConfigInvalid(f"unknown config key {key!r}")
        current = getattr(obj, name)
        if dataclasses.is_dataclass(current):
            raise ConfigInvalid(f"{key!r} is a section, not a value")
        setattr(obj, name, coerce(key, raw, current))

    def update(self, entries: dict[str, str]) -> "RunConfig":
        for k, v in entries.items():
            self.set(k, v)
        self.validate()
        return self

    def validate(self) -> "RunConfig":
        self.gen.validate()
        AugmentationConfig(**dataclasses.asdict(self.aug))  # re-runs range checks
        if len(self.split.ratios) != 3:
            raise ConfigInvalid("split.ratios needs three values")
        if not self.seeds:
            raise ConfigInvalid("seeds must not be empty")
        for name in ("batch_size", "epochs", "patience", "eval_batch_size"):
            if getattr(self.train, name) < 1:
                raise ConfigInvalid(f"train.{name} must be >= 1")
        if not self.train.peak_lrs or min(self.train.peak_lrs) <= 0:
            raise ConfigInvalid("train.peak_lrs must be positive")
        if self.pretrain.batch_size < 1 or self.pretrain.epochs < 0:
            raise ConfigInvalid("pretrain.batch_size must be >= 1 and pretrain.epochs >= 0")
        return self

    def canonical_text(self) -> str:
        flat = self.to_flat()
        return "".join(f"{k}={format_value(flat[k])}\n" for k in sorted(flat))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()


def _field_names(obj) -> set[str]:
    return {f.name for f in dataclasses.fields(obj)}


def _flatten(obj, prefix: str) -> dict[str, object]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def coerce(key: str, raw: str, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            kind = type(current[0]) if current else float
            return tuple(kind(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigInvalid(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def parse_entries(text: str, source: str = "<config>") -> dict[str, str]:
    """``key=value`` lines with ``#`` comments; later duplicates are rejected."""
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigInvalid(f"{source}: line {n}: expected key=value")
        if key in out:
            raise ConfigInvalid(f"{source}: line {n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_run_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text()
        lines = {}
        for n, line in enumerate(text.splitlines(), 1):
            lines.setdefault(line.split("#", 1)[0].partition("=")[0].strip(), n)
        for key, value in parse_entries(text, str(path)).items():
            try:
                cfg.set(key, value)
            except ConfigInvalid as exc:
                raise ConfigInvalid(f"{path}: line {lines[key]}: {exc}") from None
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    return cfg.validate()


def default_entries() -> dict[str, object]:
    return RunConfig().to_flat()

