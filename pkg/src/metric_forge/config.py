"""JSON run configuration with strict keys and explicit defaults.

A config file looks like::

    {
      "schema": 1,
      "seed": 0,
      "data": {"path": null, "synthetic": {"num_classes": 8, ...}},
      "loss": {"name": "triplet", ...},
      "train": {"learning_rate": 0.05, ...},
      "eval": {"ks": [1, 2, 4, 8]},
      "language": {"omega": 0.0, ...},
      "output_dir": "run"
    }

Every section is optional; missing keys take the defaults shown by
``metric-forge train --dump-config``. Unknown keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError
from .trainer import LanguageSpec, LossSpec, SyntheticSpec, TrainConfig

SCHEMA_VERSION = 1
SEED_ENV = "METRIC_FORGE_SEED"
DEFAULT_SEED = 0

# TrainConfig fields that live in the "train" section
TRAIN_KEYS = (
    "learning_rate",
    "proxy_learning_rate",
    "epochs",
    "batch_size",
    "encoder_mode",
    "embedding_dim",
    "normalize_embeddings",
    "sampler",
)


def resolve_seed(explicit: Optional[int], default: int) -> int:
    """``explicit`` if given, else ``$METRIC_FORGE_SEED`` if set, else ``default``.

    Raises:
        ConfigError: if the environment variable is not an integer.
    """
    if explicit is not None:
        return int(explicit)
    env = os.environ.get(SEED_ENV, "")
    if not env:
        return default
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None


@dataclass
class TrainSection:
    learning_rate: float = 0.05
    proxy_learning_rate: Optional[float] = None
    epochs: int = 100
    batch_size: int = 32
    encoder_mode: str = "linear"
    embedding_dim: int = 16
    normalize_embeddings: bool = True
    sampler: str = "uniform"


@dataclass
class DataSection:
    path: Optional[str] = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class EvalSection:
    ks: list = field(default_factory=lambda: [1, 2, 4, 8])


@dataclass
class RunConfig:
    seed: Optional[int] = None
    data: DataSection = field(default_factory=DataSection)
    loss: LossSpec = field(default_factory=LossSpec)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    language: LanguageSpec = field(default_factory=LanguageSpec)
    output_dir: str = "run"

    def resolved_seed(self) -> int:
        """Explicit seed, else ``$METRIC_FORGE_SEED``, else 0."""
        return resolve_seed(self.seed, DEFAULT_SEED)

    def to_train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            loss=self.loss,
            seed=self.resolved_seed(),
            eval_ks=tuple(int(k) for k in self.eval.ks),
            language=self.language,
            **{k: getattr(t, k) for k in TRAIN_KEYS},
        )

    def to_dict(self) -> dict:
        d = {"schema": SCHEMA_VERSION}
        d.update(dataclasses.asdict(self))
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _check_type(where: str, value, default, annotation: str):
    # light type checks; JSON ints are accepted for float fields
    if value is None:
        if "Optional" in annotation:
            return None
        raise ConfigError(f"{where} must not be null")
    if isinstance(default, bool) or annotation == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if "float" in annotation:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if "int" in annotation:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if "str" in annotation:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in raw.items():
        default = getattr(defaults, name)
        key = f"{where}.{name}"
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        elif isinstance(default, list):
            if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{key} must be a list of integers")
            kwargs[name] = list(value)
        else:
            kwargs[name] = _check_type(key, value, default, str(fields[name].type))
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    """Parse a config mapping.

    Raises:
        ConfigError: on a wrong schema version, unknown key or bad type.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    schema = raw.pop("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema {schema!r}; expected {SCHEMA_VERSION}")
    return _build(RunConfig, raw, "config")


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)
