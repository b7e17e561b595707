"""Run configuration: defaults, TOML file, then command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .correlation import DEFAULT_CELL, SigmaSearchConfig
from .errors import ConfigError, FormatError
from .losses import LossWeights
from .metrics import parse_bucket_mode
from .plane_optimizer import OptimizerConfig

_SECTIONS = {"sigma": SigmaSearchConfig, "optimizer": OptimizerConfig, "loss": LossWeights}
_TOP_LEVEL = ("cell", "seed", "local", "bucket")


@dataclass(frozen=True)
class RunConfig:
    sigma: SigmaSearchConfig = field(default_factory=SigmaSearchConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    cell: int = DEFAULT_CELL
    seed: int = 0
    local: bool = False
    bucket: str = "tertile"

    def to_json(self) -> dict:
        out = {}
        for name in _SECTIONS:
            out[name] = {k: (list(v) if isinstance(v, tuple) else v)
                         for k, v in dataclasses.asdict(getattr(self, name)).items()}
        for name in _TOP_LEVEL:
            out[name] = getattr(self, name)
        return out


def _coerce(value, default, where):
    """Match the type of ``default``; bools and numbers are not interchangeable."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(float(v) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build_section(name, values: dict, base):
    cls = _SECTIONS[name]
    current = dataclasses.asdict(base)
    for key, value in values.items():
        if key not in current:
            raise ConfigError(f"{name}.{key}: unknown setting")
        current[key] = _coerce(value, current[key], f"{name}.{key}")
    try:
        return cls(**current)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def merge(base: RunConfig, values: dict, source: str = "config") -> RunConfig:
    """Overlay a nested dict of settings on ``base``, validating each field."""
    updates = {}
    for key, value in values.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: [{key}] must be a table")
            updates[key] = _build_section(key, value, getattr(base, key))
        elif key in _TOP_LEVEL:
            updates[key] = _coerce(value, getattr(base, key), key)
        else:
            raise ConfigError(f"{source}: unknown setting {key!r}")
    cfg = dataclasses.replace(base, **updates)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.cell < 4:
        raise ConfigError(f"cell: must be at least 4, got {cfg.cell}")
    if cfg.seed < 0:
        raise ConfigError(f"seed: must be non-negative, got {cfg.seed}")
    try:
        parse_bucket_mode(cfg.bucket)
    except ValueError as exc:
        raise ConfigError(f"bucket: {exc}") from None


def load_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        # the decoder message already carries "(at line N, column M)"
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from None


def resolve(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the TOML file at ``path``, then ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        cfg = merge(cfg, load_file(path), str(path))
    if overrides:
        cfg = merge(cfg, overrides, "command line")
    validate(cfg)
    return cfg
