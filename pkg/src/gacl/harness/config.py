"""Model/run configuration with grid validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

from ..tpgat import Ablation

GRID = {
    "l_g": (1, 2, 3, 4),
    "d": (32, 64, 128, 256, 512),
    "ws": (1, 4, 8, 16, 32),
    "l_tf": (1, 2, 4, 8),
    "l_hd": (1, 2, 4, 8),
    "density": (0.05, 0.10, 0.15, 0.20),
}
# Excluded from the config hash: they change how long or how parallel a run is,
# not which model it produces or how it is scored.
_UNHASHED = ("workers", "epochs", "patience")


class ConfigError(ValueError):
    pass


class GridWarning(UserWarning):
    """A hyperparameter lies outside the published experiment grid."""


@dataclass
class ModelConfig:
    l_g: int = 2
    d: int = 128
    ws: int = 32
    l_tf: int = 8
    l_hd: int = 8
    density: float = 0.05
    reg_lambda: float = 1e-4
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1
    neighbor_cap: int | None = 64
    seed_split: int = 0
    seed_init: int = 0
    seed_sample: int = 0
    ablation: str = "full"
    target_mode: str = "raw"
    weight_decay: float | None = None
    ffn_mult: int = 4
    norm_style: str = "single"
    separate_encoders: bool = False
    decay_biases: bool = False
    workers: int = 1

    def __post_init__(self):
        self.ablation = Ablation.parse(self.ablation).value
        if isinstance(self.neighbor_cap, float) and math.isinf(self.neighbor_cap):
            self.neighbor_cap = None
        if isinstance(self.neighbor_cap, str) and self.neighbor_cap.lower() in ("inf", "none", "all"):
            self.neighbor_cap = None

    @property
    def ablation_mode(self) -> Ablation:
        return Ablation(self.ablation)

    @property
    def effective_weight_decay(self) -> float:
        return self.reg_lambda if self.weight_decay is None else self.weight_decay

    def validate(self, strict_grid: bool = False) -> "ModelConfig":
        ints = ("l_g", "d", "ws", "l_tf", "l_hd", "batch_size", "ffn_mult", "workers")
        for name in ints:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("epochs", "patience"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {v!r}")
        if not 1 <= self.l_g <= 4:
            raise ConfigError(f"l_g must be in 1..4, got {self.l_g}")
        if self.d % 2:
            raise ConfigError(f"d must be even for the positional encoding, got {self.d}")
        if self.d % self.l_hd:
            raise ConfigError(f"l_hd={self.l_hd} must divide d={self.d}")
        if not 0.0 < self.density < 1.0:
            raise ConfigError(f"density must lie in (0, 1), got {self.density}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        for name in ("reg_lambda", "lr"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a finite non-negative number, got {v!r}")
        if self.weight_decay is not None and (not math.isfinite(self.weight_decay) or self.weight_decay < 0):
            raise ConfigError(f"weight_decay must be finite and non-negative, got {self.weight_decay}")
        if self.neighbor_cap is not None and (not isinstance(self.neighbor_cap, int) or self.neighbor_cap < 1):
            raise ConfigError(f"neighbor_cap must be a positive integer or inf, got {self.neighbor_cap!r}")
        if self.target_mode not in ("raw", "normalized"):
            raise ConfigError(f"target_mode must be 'raw' or 'normalized', got {self.target_mode!r}")
        if self.norm_style not in ("single", "standard"):
            raise ConfigError(f"norm_style must be 'single' or 'standard', got {self.norm_style!r}")
        for name, allowed in GRID.items():
            v = getattr(self, name)
            on_grid = any(abs(v - a) < 1e-12 for a in allowed)
            if not on_grid:
                msg = f"{name}={v} is outside the experiment grid {list(allowed)}"
                if strict_grid:
                    raise ConfigError(msg)
                warnings.warn(msg, GridWarning, stacklevel=2)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, data: dict) -> "ModelConfig":
        unknown = sorted(set(data) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> ModelConfig:
    """Read a flat TOML or JSON file whose keys are ModelConfig fields."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key/value table")
    return ModelConfig.from_mapping(data)
