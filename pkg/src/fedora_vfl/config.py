"""Experiment configuration: nested blocks parsed from YAML with dotted overrides."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import yaml

from .baselines import BaselineConfig
from .exceptions import ConfigError, IngestionError
from .fedora import UnlearnConfig

METHODS = ("fedora", "retrain", "ga")


@dataclass
class DatasetBlock:
    kind: str = "tabular"  # tabular | images | csv
    n_classes: int = 5
    per_class: int = 1000
    n_features: int = 20
    separation: float = 3.0
    height: int = 16
    width: int = 16
    image_noise: float = 0.15
    path: Optional[str] = None
    label_column: str = "label"
    delimiter: str = ","
    standardize: bool = True
    n_parties: int = 3
    test_fraction: float = 0.2
    seed: int = 0


@dataclass
class TrainingBlock:
    embed_dim: int = 16
    bottom_hidden: list = field(default_factory=lambda: [32])
    top_hidden: list = field(default_factory=lambda: [32])
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 64
    seed: int = 0


@dataclass
class UnlearnBlock:
    method: str = "fedora"
    classes: list = field(default_factory=lambda: [0, 1])
    fraction: float = 0.5
    split_seed: int = 0
    fedora: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)

    def fedora_config(self) -> UnlearnConfig:
        return _construct(UnlearnConfig, self.fedora, "unlearn.fedora")

    def baseline_config(self, training: "TrainingBlock") -> BaselineConfig:
        params = {"epochs": training.epochs, "lr": training.lr, "batch_size": training.batch_size,
                  "seed": training.seed + 1}
        params.update(self.baseline)
        params["method"] = "retrain" if self.method == "retrain" else "gradient_ascent"
        return _construct(BaselineConfig, params, "unlearn.baseline")


@dataclass
class AuditBlock:
    mia: bool = True
    mia_seed: int = 0
    backdoor: bool = False
    trigger_size: int = 2
    trigger_value: float = 1.0
    target_label: int = 0
    compare_retrain: bool = False


@dataclass
class NoiseBlock:
    embedding_std: float = 0.0
    noniid_party: Optional[int] = None
    noniid_std: float = 0.0
    noniid_seed: int = 0


@dataclass
class OutputBlock:
    dir: str = "results"


@dataclass
class ExperimentConfig:
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    training: TrainingBlock = field(default_factory=TrainingBlock)
    unlearn: UnlearnBlock = field(default_factory=UnlearnBlock)
    audit: AuditBlock = field(default_factory=AuditBlock)
    noise: NoiseBlock = field(default_factory=NoiseBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    def validate(self, check_files=True):
        if self.unlearn.method not in METHODS:
            raise ConfigError(f"unlearn.method must be one of {METHODS}")
        if self.dataset.kind not in ("tabular", "images", "csv"):
            raise ConfigError("dataset.kind must be tabular, images or csv")
        if self.dataset.kind == "csv":
            if not self.dataset.path:
                raise ConfigError("dataset.path is required for csv datasets")
            if check_files and not Path(self.dataset.path).is_file():
                raise ConfigError(f"dataset.path {self.dataset.path!r} does not exist")
        if self.audit.backdoor and self.dataset.kind != "images":
            raise ConfigError("the backdoor audit needs an image dataset")
        if not 0.0 < self.dataset.test_fraction < 1.0:
            raise ConfigError("dataset.test_fraction must lie in (0, 1)")
        # surfaces invalid optimizer settings before any training happens, and
        # stores the coerced values so the report echo is typed
        fed = self.unlearn.fedora_config()
        self.unlearn.fedora = {k: getattr(fed, k) for k in self.unlearn.fedora}
        base = self.unlearn.baseline_config(self.training)
        self.unlearn.baseline = {k: getattr(base, k) for k in self.unlearn.baseline}
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(value, default, where):
    """Match scalar types to the field default; YAML reads ``1e-5`` as a string."""
    if isinstance(default, bool) or default is None:
        if default is not None and not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, (int, float)) and not isinstance(value, bool):
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        if isinstance(default, int):
            if number != int(number):
                raise ConfigError(f"{where}: expected an integer, got {value!r}")
            return int(number)
        return number
    return value


def _construct(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: _coerce(v, known[k].default, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(value, known[name].default, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "config")


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars."""
    data = copy.deepcopy(data or {})
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise IngestionError(f"{path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return config_from_dict(apply_overrides(data, overrides)).validate()
