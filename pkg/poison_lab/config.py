"""Experiment configuration: defaults per scenario, JSON loading and a stable hash."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .errors import ConfigError
from .model import PROFILES
from .optim import FreezeMode, InitMode, TrainConfig, end_to_end_profile, transfer_profile
from .poison import (
    DEFAULT_DECAY,
    END_TO_END_BETA,
    END_TO_END_MAX_ITERS,
    TRANSFER_LAM,
    TRANSFER_MAX_ITERS,
    PoisonConfig,
)

SCENARIOS = ("transfer", "end2end", "outliers", "ablation")
TARGET_POLICIES = ("random", "outlier")
DATA_SOURCES = ("synth", "cifar")

# Full CIFAR-10 training set size; batch sizes shrink below it.
REFERENCE_TRAIN_SIZE = 50000

SMOKE_MAX_ITERS = 300
SMOKE_MAX_POISONS = 10

# Fields that do not change a trial's outcome and stay out of the hash.
_UNHASHED = ("out_dir", "jobs", "craft_jobs")


@dataclass
class DatasetConfig:
    """Where images come from and how many of them to use."""

    source: str = "synth"
    path: Optional[str] = None
    classes: int = 2
    per_class: int = 30
    test_per_class: int = 20
    hw: int = 16
    channels: int = 1
    cifar_classes: List[int] = field(default_factory=lambda: [0, 2])
    cifar_per_class: Optional[int] = 250
    cifar_test_per_class: Optional[int] = 100
    dedup: bool = True

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"dataset source must be one of {DATA_SOURCES}, got '{self.source}'")
        if self.source == "cifar" and not self.path:
            raise ConfigError("a cifar dataset needs 'path' pointing at the binary batches")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        for name in ("per_class", "test_per_class", "hw", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dataset {name} must be >= 1, got {getattr(self, name)}")
        if self.source == "cifar":
            if len(set(self.cifar_classes)) < 2 or any(not 0 <= c < 10 for c in self.cifar_classes):
                raise ConfigError(f"cifar_classes must hold 2+ distinct ids in 0..9, got {self.cifar_classes}")

    @property
    def num_classes(self) -> int:
        return len(self.cifar_classes) if self.source == "cifar" else self.classes


@dataclass
class ExperimentConfig:
    """Everything one harness run needs."""

    scenario: str = "transfer"
    profile: str = "tiny"
    lrn: bool = True
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    retrain: TrainConfig = field(default_factory=transfer_profile)
    poison: PoisonConfig = field(default_factory=PoisonConfig)
    gammas: List[float] = field(default_factory=lambda: [0.0])
    n_poisons: List[int] = field(default_factory=lambda: [1])
    n_trials: int = 20
    only_trials: List[int] = field(default_factory=list)
    target_selection: str = "random"
    outlier_k: int = 20
    base_class: int = 0
    target_class: int = 1
    seed: int = 0
    out_dir: str = "runs"
    checkpoint: Optional[str] = None
    jobs: Optional[int] = None
    craft_jobs: int = 1
    reference_train_size: int = REFERENCE_TRAIN_SIZE

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got '{self.scenario}'")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got '{self.profile}'")
        if self.target_selection not in TARGET_POLICIES:
            raise ConfigError(f"target_selection must be one of {TARGET_POLICIES}, got '{self.target_selection}'")
        if self.n_trials < 1:
            raise ConfigError(f"n_trials must be >= 1, got {self.n_trials}")
        if self.base_class == self.target_class:
            raise ConfigError("base_class and target_class must differ")
        classes = self.dataset.num_classes
        for name in ("base_class", "target_class"):
            if not 0 <= getattr(self, name) < classes:
                raise ConfigError(f"{name} {getattr(self, name)} outside 0..{classes - 1}")
        if not self.gammas or any(not 0.0 <= g <= 1.0 for g in self.gammas):
            raise ConfigError(f"gammas must be a non-empty list within [0, 1], got {self.gammas}")
        if not self.n_poisons or any(n < 1 for n in self.n_poisons):
            raise ConfigError(f"n_poisons must be a non-empty list of positive counts, got {self.n_poisons}")
        if any(not 0 <= t < self.n_trials for t in self.only_trials):
            raise ConfigError(f"only_trials must index 0..{self.n_trials - 1}, got {self.only_trials}")
        if self.outlier_k < 1:
            raise ConfigError(f"outlier_k must be >= 1, got {self.outlier_k}")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.craft_jobs < 1:
            raise ConfigError(f"craft_jobs must be >= 1, got {self.craft_jobs}")
        if self.reference_train_size < 1:
            raise ConfigError(f"reference_train_size must be >= 1, got {self.reference_train_size}")

    def trial_indices(self) -> List[int]:
        return sorted(set(self.only_trials)) if self.only_trials else list(range(self.n_trials))


def _pretrain_defaults(profile: str) -> TrainConfig:
    if profile == "table1":
        return TrainConfig(epochs=60, batch_size=128, lr=1e-3,
                           freeze=FreezeMode.ALL_LAYERS, init=InitMode.COLD)
    return TrainConfig(epochs=30, batch_size=16, lr=1e-3,
                       freeze=FreezeMode.ALL_LAYERS, init=InitMode.COLD)


def _dataset_defaults(scenario: str, profile: str) -> DatasetConfig:
    end_to_end = scenario != "transfer"
    if profile == "table1":
        return DatasetConfig(per_class=250, test_per_class=100, hw=32, channels=3)
    return DatasetConfig(per_class=100 if end_to_end else 30,
                         test_per_class=60 if end_to_end else 20)


def default_config(scenario: str = "transfer", profile: str = "tiny") -> ExperimentConfig:
    """Hyperparameters for each scenario at desk scale."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got '{scenario}'")
    common = dict(scenario=scenario, profile=profile,
                  dataset=_dataset_defaults(scenario, profile),
                  pretrain=_pretrain_defaults(profile))
    if scenario == "transfer":
        return ExperimentConfig(
            retrain=transfer_profile(),
            poison=PoisonConfig(beta0=0.25, lam=TRANSFER_LAM, max_iters=TRANSFER_MAX_ITERS,
                                decay=DEFAULT_DECAY),
            gammas=[0.0], n_poisons=[1], n_trials=20, **common,
        )
    poison = PoisonConfig(beta_override=END_TO_END_BETA, max_iters=END_TO_END_MAX_ITERS)
    if scenario == "end2end":
        return ExperimentConfig(retrain=end_to_end_profile(), poison=poison,
                                gammas=[0.3], n_poisons=[1, 10, 25, 50], n_trials=20, **common)
    if scenario == "outliers":
        return ExperimentConfig(retrain=end_to_end_profile(), poison=poison,
                                gammas=[0.3], n_poisons=[50], n_trials=20,
                                target_selection="outlier", outlier_k=20, **common)
    return ExperimentConfig(retrain=end_to_end_profile(), poison=poison,
                            gammas=[0.3], n_poisons=[50], n_trials=15, **common)


def apply_smoke(cfg: ExperimentConfig) -> ExperimentConfig:
    """Halve trial counts and cap crafting iterations and sweep sizes."""
    n_poisons: List[int] = []
    for n in cfg.n_poisons:
        capped = min(n, SMOKE_MAX_POISONS)
        if capped not in n_poisons:
            n_poisons.append(capped)
    n_trials = max(1, cfg.n_trials // 2)
    return dataclasses.replace(
        cfg,
        n_trials=n_trials,
        only_trials=[t for t in cfg.only_trials if t < n_trials],
        outlier_k=max(1, cfg.outlier_k // 2),
        n_poisons=n_poisons,
        poison=dataclasses.replace(cfg.poison, max_iters=min(cfg.poison.max_iters, SMOKE_MAX_ITERS)),
    )


# --- dict / JSON mapping ---------------------------------------------------

_NESTED = {
    "dataset": DatasetConfig,
    "pretrain": TrainConfig,
    "retrain": TrainConfig,
    "poison": PoisonConfig,
}


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return _plain(cfg)


def _overlay(instance, updates: Dict[str, Any], where: str):
    known = {f.name for f in dataclasses.fields(instance)}
    unknown = sorted(set(updates) - known)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")
    merged = _plain(instance)
    for key, value in updates.items():
        nested = _NESTED.get(key) if where == "config" else None
        if nested is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}' must be an object")
            merged[key] = _overlay(getattr(instance, key), value, key)
        else:
            merged[key] = value
    if where == "config":
        for key, nested in _NESTED.items():
            if isinstance(merged[key], dict):
                merged[key] = nested(**merged[key])
    try:
        return type(instance)(**merged)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid {where} value: {exc}") from exc


def config_from_dict(data: Dict[str, Any], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Overlay ``data`` on the scenario defaults, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    if base is None:
        base = default_config(data.get("scenario", "transfer"), data.get("profile", "tiny"))
    return _overlay(base, data, "config")


def load_config(path: Union[str, Path], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file '{path}' is not valid JSON: {exc}") from exc
    return config_from_dict(data, base)


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON of every outcome-relevant field."""
    record = config_to_dict(cfg)
    for key in _UNHASHED:
        record.pop(key, None)
    canonical = json.dumps(record, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _type_name(annotation: Any) -> str:
    if isinstance(annotation, type):
        return annotation.__name__
    return str(annotation).replace("typing.", "")


def schema(instance=None) -> Dict[str, Any]:
    """Field names, types and defaults of the configuration, nested."""
    instance = instance if instance is not None else default_config()
    described: Dict[str, Any] = {}
    for f in dataclasses.fields(instance):
        value = getattr(instance, f.name)
        if dataclasses.is_dataclass(value):
            described[f.name] = {"type": type(value).__name__, "fields": schema(value)}
        else:
            described[f.name] = {"type": _type_name(f.type), "default": _plain(value)}
    return described
