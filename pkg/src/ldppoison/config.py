"""Experiment configuration: dataclasses plus a strict loader for nested mappings.

Unknown keys and missing required keys are errors that name the offending
field path (``attack.scal``), so a typo cannot silently change an experiment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .aggregation import AggregationConfig
from .attacks import KINDS, KNOWLEDGE, MODES
from .ldp import ProtocolConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class AttackSpec:
    """Attack settings without the client counts (those come from the experiment)."""

    kind: str
    mode: str = "output"
    knowledge: str = "local"
    ate: int = 1
    scal: float = 1.0
    t_scale: float = 1.0
    est_from_view: bool = False


@dataclass(frozen=True)
class DataSource:
    kind: str = "synth"  # "idx" | "synth"
    images: Optional[str] = None
    labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    num_classes: int = 10
    subset: Optional[int] = None
    test_fraction: float = 0.2
    input_dim: int = 20
    samples_per_class: int = 100
    spread: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "logistic_regression"
    hidden_dim: Optional[int] = None


@dataclass(frozen=True)
class PartitionSpec:
    alpha: float = 500.0
    seed: Optional[int] = None


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: ProtocolConfig
    num_clients: int
    rounds: int
    dataset: DataSource = field(default_factory=DataSource)
    model: ModelConfig = field(default_factory=ModelConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    attack: Optional[AttackSpec] = None
    malicious_ids: tuple[int, ...] = ()
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    global_seed: int = 0
    name: str = "experiment"

    def __post_init__(self):
        object.__setattr__(self, "malicious_ids", tuple(sorted(int(i) for i in self.malicious_ids)))
        if self.num_clients < 1:
            raise ConfigError("num_clients", "must be at least 1")
        if self.rounds < 1:
            raise ConfigError("rounds", "must be at least 1")
        if len(set(self.malicious_ids)) != len(self.malicious_ids):
            raise ConfigError("malicious_ids", "contains duplicates")
        if any(not 0 <= i < self.num_clients for i in self.malicious_ids):
            raise ConfigError("malicious_ids", f"ids must lie in [0, {self.num_clients})")
        if self.protocol.protocol == "ldpfl" and self.aggregation.rule == "trimmedmean":
            raise ConfigError("aggregation.rule", "trimmedmean is not combined with ldpfl")
        if self.dataset.kind not in ("idx", "synth"):
            raise ConfigError("dataset.kind", f"unknown dataset kind {self.dataset.kind!r}")
        if self.dataset.kind == "idx" and not (self.dataset.images and self.dataset.labels):
            raise ConfigError("dataset", "idx datasets need images and labels paths")
        if not 0 < self.dataset.test_fraction < 1:
            raise ConfigError("dataset.test_fraction", "must lie in (0, 1)")
        try:
            self.aggregation.validate(self.num_clients)
        except ValueError as exc:
            raise ConfigError("aggregation", str(exc)) from None

    @property
    def n_malicious(self) -> int:
        return len(self.malicious_ids)


_NESTED = {
    "protocol": ProtocolConfig,
    "aggregation": AggregationConfig,
    "attack": AttackSpec,
    "dataset": DataSource,
    "model": ModelConfig,
    "partition": PartitionSpec,
}

_CHOICES = {
    "attack.kind": KINDS,
    "attack.mode": MODES,
    "attack.knowledge": KNOWLEDGE,
    "model.kind": ("logistic_regression", "mlp2"),
}


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for name, f in fields.items():
        sub = f"{path}.{name}" if path else name
        required = f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        if name not in data:
            if required:
                raise ConfigError(sub, "missing required field")
            continue
        value = data[name]
        if sub in _CHOICES and value not in _CHOICES[sub]:
            raise ConfigError(sub, f"must be one of {list(_CHOICES[sub])}, got {value!r}")
        if cls is ExperimentConfig and name in _NESTED:
            value = None if value is None else _build(_NESTED[name], value, sub)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["malicious_ids"] = list(cfg.malicious_ids)
    return d


def load(path, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Read a YAML (or JSON) config; relative data paths resolve against the file's directory."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from None
    cfg = from_dict(data)
    return resolve_paths(cfg, base_dir or path.parent)


def resolve_paths(cfg: ExperimentConfig, base_dir: Path) -> ExperimentConfig:
    ds = cfg.dataset
    updates = {}
    for key in ("images", "labels", "test_images", "test_labels"):
        value = getattr(ds, key)
        if value is not None and not Path(value).is_absolute():
            updates[key] = str((Path(base_dir) / value).resolve())
    if not updates:
        return cfg
    return dataclasses.replace(cfg, dataset=dataclasses.replace(ds, **updates))


def canonical_json(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()
