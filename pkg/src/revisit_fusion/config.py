"""Experiment configuration: strict JSON parsing and content hashing.

Configs are plain dataclasses loaded from a single JSON file. Unknown keys
are rejected anywhere in the document so a config hash always covers every
effective setting.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .fusion import FusionStrategy
from .models import ModelConfig
from .synthetic import SyntheticParams
from .training import TrainConfig


class ConfigError(ValueError):
    """Config file is malformed or inconsistent."""


@dataclass(frozen=True)
class DatasetRef:
    """Either an existing manifest or parameters for a generated dataset."""

    manifest: str | None = None
    synthetic: SyntheticParams | None = None

    def __post_init__(self):
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("dataset needs exactly one of 'manifest' or 'synthetic'")


@dataclass(frozen=True)
class BandArms:
    """Channel subsets compared by the band-comparison command."""

    rgb: tuple[str, ...]
    multispectral: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "rgb", tuple(self.rgb))
        object.__setattr__(self, "multispectral", tuple(self.multispectral))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetRef
    model: ModelConfig
    strategies: tuple[FusionStrategy, ...] = tuple(FusionStrategy)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train: TrainConfig | None = None
    band_arms: BandArms | None = None
    save_checkpoints: bool = True

    def __post_init__(self):
        strategies = tuple(FusionStrategy(s) for s in self.strategies)
        if not strategies:
            raise ConfigError("strategies must be non-empty")
        if len(set(strategies)) != len(strategies):
            raise ConfigError("strategies contains duplicates")
        object.__setattr__(self, "strategies", strategies)
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds:
            raise ConfigError("seeds must be non-empty")
        object.__setattr__(self, "seeds", seeds)


# TrainConfig.model/strategy/seed are filled in per run by the harness; the
# config file's "train" section provides the shared hyperparameters.
_TRAIN_TEMPLATE_EXCLUDED = ("model", "strategy", "seed")


def _convert(hint, value, path: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            if type(None) in typing.get_args(hint):
                return None
            raise ConfigError(f"{path}: may not be null")
        errors = []
        for arm in args:
            try:
                return _convert(arm, value, path)
            except (ConfigError, TypeError, ValueError) as exc:
                errors.append(str(exc))
        raise ConfigError(f"{path}: no matching type ({'; '.join(errors)})")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(hint)
        item_hint = args[0] if args else typing.Any
        return tuple(_convert(item_hint, v, f"{path}[{i}]") for i, v in enumerate(value))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return dict(value)
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if dataclasses.is_dataclass(hint):
        return dataclass_from_dict(hint, value, path)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def dataclass_from_dict(cls, data, path: str = "config"):
    """Build a dataclass from nested dicts, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    allowed = set(fields)
    if cls is TrainConfig:
        allowed -= set(_TRAIN_TEMPLATE_EXCLUDED)
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    hints = typing.get_type_hints(cls)
    kwargs = {
        name: _convert(hints[name], value, f"{path}.{name}")
        for name, value in data.items()
    }
    if cls is TrainConfig and "model" not in kwargs:
        kwargs["model"] = None
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_experiment_config(path: Path | str) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return dataclass_from_dict(ExperimentConfig, doc)


def _jsonable(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {
            f.name: _jsonable(getattr(value, f.name))
            for f in dataclasses.fields(value)
        }
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, Path):
        return str(value)
    return value


def config_hash(config) -> str:
    """Stable short hash of the full effective configuration."""
    canon = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
