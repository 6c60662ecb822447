"""Run configuration, presets and config-file handling."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .model import ModelConfig

DATA_ENV = "TEXTCAPE_DATA"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data_root: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 3e-4
    milestones: list[int] = field(default_factory=lambda: [45, 55])
    gamma: float = 0.1
    epochs: int = 60
    batch_size: int = 16
    lambda_heatmap: float = 1.0
    sigma: float = 1.0
    seed: int = 0
    grad_clip: float | None = None
    pck_threshold: float = 0.2
    validate: bool = True

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.milestones = [int(m) for m in self.milestones]
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ConfigError(f"milestones {self.milestones} must all be < epochs ({self.epochs})")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    def resolved_data_root(self) -> Path:
        root = self.data_root or os.environ.get(DATA_ENV)
        if not root:
            raise ConfigError(f"no dataset root: set data_root or ${DATA_ENV}")
        return Path(root)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        model = d.get("model", {})
        if isinstance(model, dict):
            mknown = {f.name for f in fields(ModelConfig)}
            bad = set(model) - mknown
            if bad:
                raise ConfigError(f"unknown model config keys {sorted(bad)}")
        return cls(**d)


def desk_preset(**overrides) -> RunConfig:
    """Laptop-CPU scale: 64x64 images, patch 8 (8x8 grid), C=64, K=20, L=2."""
    return RunConfig(**overrides)


def full_preset(**overrides) -> RunConfig:
    model = ModelConfig(model_dim=256, text_dim=768, image_dim=768, max_keypoints=100,
                        patch_size=16, encoder_blocks=3, decoder_layers=3)
    base = dict(model=model, lr=1e-5, milestones=[160, 180], epochs=200, batch_size=16)
    base.update(overrides)
    return RunConfig(**base)


PRESETS = {"desk": desk_preset, "full": full_preset}


def _coerce(value: str):
    return yaml.safe_load(value)


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` or ``model.key=value`` overrides (values parsed as YAML)."""
    d = config.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        target = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(target.get(p), dict):
                raise ConfigError(f"unknown config section {p!r}")
            target = target[p]
        if parts[-1] not in target:
            raise ConfigError(f"unknown config key {key!r}")
        target[parts[-1]] = _coerce(raw)
    return RunConfig.from_dict(d)


def load_config(path: str | Path | None = None, preset: str = "desk",
                overrides: list[str] | None = None) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    config = PRESETS[preset]()
    if path is not None:
        doc = yaml.safe_load(Path(path).read_text()) or {}
        d = config.to_dict()
        model_over = doc.pop("model", {}) or {}
        d.update(doc)
        d["model"].update(model_over)
        config = RunConfig.from_dict(d)
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def with_model(config: RunConfig, **model_changes) -> RunConfig:
    return replace(config, model=replace(config.model, **model_changes))
