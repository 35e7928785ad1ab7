"""Flat ``key = value`` config files parsed into typed dataclasses."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional

from .pipeline import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    """Which dataset to load and how to preprocess it.

    ``dataset`` is one of mnist, fashion_mnist, emnist, cifar10, cifar100,
    mnist_bundled (5k digits shipped with mlxtend) or synthetic.
    """
    dataset: str = "mnist"
    n_train: int = 0  # 0 keeps the full split
    n_test: int = 0
    preprocess: str = "auto"  # auto | scale01 | meanstd | none
    synthetic_classes: int = 2
    synthetic_per_class: int = 64
    synthetic_size: int = 12
    synthetic_channels: int = 1
    synthetic_noise: float = 0.3
    synthetic_seed: int = 0


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_text(self) -> str:
        lines = []
        for section in (self.train, self.data):
            for f in fields(section):
                lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, kind, key: str, lineno: int):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            as_float = float(raw)
            if not as_float.is_integer():
                raise ValueError(raw)
            return int(as_float)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {kind.__name__}, got {raw!r}") from None


def _field_types(cls) -> Dict[str, type]:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(cls)}


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown or repeated keys are errors."""
    train_types = _field_types(TrainConfig)
    data_types = _field_types(DataConfig)
    train_kw, data_kw, seen = {}, {}, set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key in train_types:
            train_kw[key] = _parse(raw, train_types[key], key, lineno)
        elif key in data_types:
            data_kw[key] = _parse(raw, data_types[key], key, lineno)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        return RunConfig(TrainConfig(**train_kw), DataConfig(**data_kw))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def with_seed(cfg: RunConfig, seed: Optional[int]) -> RunConfig:
    return cfg if seed is None else replace(cfg, train=replace(cfg.train, rng_seed=seed))
