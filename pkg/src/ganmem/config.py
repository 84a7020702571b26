"""Experiment configuration: one YAML/JSON document, validated before anything runs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .compression import EnergyPolicy
from .data import DOMAINS
from .models import ArchConfig, ConfigError
from .replay import ClassifierConfig
from .training import ABLATIONS, TrainHyper


@dataclass(frozen=True)
class DataSpec:
    """Either an unlabelled domain (``domain``) or a labelled task (``labeled_task`` + ``classes``)."""

    domain: str | None = "source"
    n: int = 2048
    seed: int = 0
    labeled_task: int | None = None
    classes: int = 1
    n_per_class: int = 200

    def __post_init__(self):
        if self.labeled_task is None:
            if self.domain not in DOMAINS:
                raise ConfigError(f"unknown domain {self.domain!r}; known: {sorted(DOMAINS)}")
            if self.n < 2:
                raise ConfigError("data.n must be >= 2")
        else:
            if self.labeled_task < 0 or self.classes < 1 or self.n_per_class < 1:
                raise ConfigError("labeled task needs task >= 0, classes >= 1, n_per_class >= 1")

    @property
    def conditional(self) -> bool:
        return self.labeled_task is not None and self.classes > 1

    def build(self, size: int, workers=None):
        from .data import make_dataset, make_labeled_task

        if self.labeled_task is not None:
            return make_labeled_task(self.labeled_task, self.classes, self.n_per_class, size, self.seed, workers)
        return make_dataset(self.domain, self.n, size, self.seed, workers)


@dataclass(frozen=True)
class StreamSpec:
    n_tasks: int = 4
    classes_per_task: int = 3
    n_train: int = 200
    n_test: int = 100
    seed: int = 0

    def __post_init__(self):
        if min(self.n_tasks, self.classes_per_task, self.n_train, self.n_test) < 1:
            raise ConfigError("stream sizes must be >= 1")


@dataclass(frozen=True)
class EvalSpec:
    n_samples: int = 1024
    seed: int = 12345
    digest_samples: int = 64
    digest_seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2 or self.digest_samples < 1:
            raise ConfigError("eval sample counts too small")


@dataclass(frozen=True)
class ExperimentConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    energy: EnergyPolicy = field(default_factory=EnergyPolicy)
    data: DataSpec = field(default_factory=DataSpec)
    stream: StreamSpec = field(default_factory=StreamSpec)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    compressed: bool = False
    ablation: str | None = None

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of NoNorm, NoBias or null; got {self.ablation!r}")
        if self.compressed and self.ablation is not None:
            raise ConfigError("ablations apply to uncompressed training only")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                out[f.name] = v.to_dict()
            elif hasattr(v, "__dataclass_fields__"):
                out[f.name] = asdict(v)
            else:
                out[f.name] = v
        return json.loads(json.dumps(out))  # tuples -> lists

    def with_overrides(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in kw.items():
            if value is None:
                continue
            section, _, name = key.partition(".")
            if name:
                d[section][name] = value
            else:
                d[section] = value
        return from_dict(d)


_SECTIONS = {
    "arch": ArchConfig,
    "train": TrainHyper,
    "energy": EnergyPolicy,
    "data": DataSpec,
    "stream": StreamSpec,
    "classifier": ClassifierConfig,
    "eval": EvalSpec,
}
_TUPLES = {("arch", "block_channel_schedule"), ("classifier", "betas")}


def _section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    values = {}
    for key, value in raw.items():
        if (name, key) in _TUPLES:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name}.{key} must be a list")
            value = tuple(value)
        values[key] = value
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - set(_SECTIONS) - {"compressed", "ablation"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {name: _section(name, cls, raw[name]) for name, cls in _SECTIONS.items() if name in raw}
    for flag in ("compressed",):
        if flag in raw:
            if not isinstance(raw[flag], bool):
                raise ConfigError(f"{flag} must be true or false")
            kw[flag] = raw[flag]
    if "ablation" in raw:
        kw["ablation"] = raw["ablation"]
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return from_dict(raw)
