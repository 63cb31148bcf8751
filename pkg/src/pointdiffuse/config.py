"""Flat key=value run configuration."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # diffusion
    T: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    scale: float = 1.0
    # objective / optimisation
    gamma: float = 0.5
    label_loss: str = "mse"
    lr: float = 2e-3
    weight_decay: float = 1e-4
    epochs: int = 200
    batch: int = 1
    milestones: tuple = (120, 170)
    lr_decay: float = 0.3
    # architecture
    k: int = 16
    levels: int = 4
    channels: tuple = (32, 64, 128, 256)
    ratio: float = 0.25
    time_dim: int = 32
    semantic_dim: int = 32
    semantic_skip: bool = True
    semantic_source: str = "features"
    cache: bool = True
    # condition pretraining
    pretrain_epochs: int = 200
    pretrain_lr: float = 1e-2
    # data
    grid: float = 0.0
    views: int = 4  # training views per scene: the original plus seeded scale/jitter copies
    max_points: int = 80000
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.label_loss not in ("mse", "ce"):
            raise ConfigError("label_loss must be 'mse' or 'ce'")
        if self.semantic_source not in ("features", "logits"):
            raise ConfigError("semantic_source must be 'features' or 'logits'")
        if len(self.channels) != self.levels:
            raise ConfigError(f"channels {self.channels} must list one width per level ({self.levels})")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.batch < 1 or self.views < 1:
            raise ConfigError("batch and views must be >= 1")
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, pairs: dict[str, str]) -> "Config":
        valid = {f.name: f for f in fields(self)}
        changes = {}
        for key, raw in pairs.items():
            if key not in valid:
                raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid)}")
            changes[key] = _coerce(getattr(self, key), raw, key)
        return self.replace(**changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha1(self.to_text().encode()).hexdigest()[:12]


def _coerce(current, raw: str, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        cfg = cfg.with_overrides(parse_pairs(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
