"""Run configuration dataclasses shared across the pipeline.

These are plain, JSON-able records. Serialization and file handling live in
``storage``; the training loop re-exports :class:`TrainConfig` and the CLI
consumes :class:`PipelineConfig` as the single source of truth for a run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class TrainConfig:
    """Hyperparameters of one decoder training run."""

    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    early_stop_patience: int = 5
    scheduler_patience: int = 2
    min_lr: float = 1e-5
    max_epochs: int = 100
    mismatch_policy: str = "random"  # "random" | "fixed_offset"
    segment_seconds: float = 5.0
    val_fraction: float = 0.2
    dtype: str = "f64"  # compute precision; checkpoints are always f64
    seed: int = 0
    instance: int = 0  # ensemble instance index; (seed, instance) derives the RNG stream

    def validate(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        for name in ("lr", "min_lr", "segment_seconds", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.early_stop_patience < 1 or self.scheduler_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.mismatch_policy not in ("random", "fixed_offset"):
            raise ConfigError(f"unknown mismatch_policy {self.mismatch_policy!r}")
        if not (0 < self.val_fraction < 1):
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")


@dataclass
class CohortParams:
    """Parameters of a synthetic cohort (consumed by the synth stage)."""

    n_train: int = 8
    n_heldout: int = 2
    duration_s: float = 300.0
    n_channels: int = 64
    rate_hz: float = 512.0
    g_lf_range: tuple[float, float] = (2.4, 3.6)
    g_gamma_range: tuple[float, float] = (0.9, 1.5)
    noise_level: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_train < 1 or self.n_heldout < 1:
            raise ConfigError("cohort needs at least 1 train and 1 heldout participant")
        if self.duration_s < 10.0:
            raise ConfigError("recordings must be at least 10 s for training material")
        if self.n_channels < 2:
            raise ConfigError("need at least 2 channels")
        if self.rate_hz < 512.0:
            raise ConfigError("synthesis rate must be >= 512 Hz")
        for lo, hi in (self.g_lf_range, self.g_gamma_range):
            if lo < 0 or hi < lo:
                raise ConfigError("gain ranges must satisfy 0 <= lo <= hi")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")


@dataclass
class PipelineConfig:
    """Full run configuration: rates, bands, task sizes, and nested stage configs."""

    lf_rate_hz: float = 64.0
    gamma_rate_hz: float = 512.0
    gamma_band_hz: tuple[float, float] = (35.0, 150.0)
    alt_gamma_band_hz: tuple[float, float] = (70.0, 220.0)
    segment_seconds: float = 5.0
    n_imposters: int = 4
    allow_arbitrary_imposters: bool = False
    imposter_policy: str = "random"  # "random" | "fixed_offset"
    ensemble_size: int = 16
    ci_method: str = "t"  # "t" | "normal"
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: CohortParams = field(default_factory=CohortParams)

    def validate(self) -> None:
        if self.lf_rate_hz <= 0 or self.gamma_rate_hz <= 0:
            raise ConfigError("sampling rates must be positive")
        for low, high in (self.gamma_band_hz, self.alt_gamma_band_hz):
            if not (0 < low < high < self.gamma_rate_hz / 2):
                raise ConfigError(
                    f"band ({low}, {high}) Hz must satisfy 0 < low < high < rate/2 "
                    f"at {self.gamma_rate_hz} Hz"
                )
        if self.segment_seconds <= 0:
            raise ConfigError("segment_seconds must be positive")
        if self.n_imposters not in (1, 4) and not self.allow_arbitrary_imposters:
            raise ConfigError(
                f"n_imposters={self.n_imposters} not allowed; allowed values are {{1, 4}} "
                "(set allow_arbitrary_imposters to lift this)"
            )
        if self.n_imposters < 1:
            raise ConfigError("n_imposters must be >= 1")
        if self.imposter_policy not in ("random", "fixed_offset"):
            raise ConfigError(f"unknown imposter_policy {self.imposter_policy!r}")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be >= 1")
        if self.ci_method not in ("t", "normal"):
            raise ConfigError(f"unknown ci_method {self.ci_method!r}")
        self.train.validate()
        self.synth.validate()


def _coerce(template: Any, value: Any, path: str) -> Any:
    """Coerce a JSON value onto the type of a dataclass field's default."""
    if dataclasses.is_dataclass(template):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _from_dict(type(template), value, path)
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{path}: expected an integer")
        return int(value)
    if isinstance(template, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(template, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(template):
            raise ConfigError(f"{path}: expected a sequence of length {len(template)}")
        return tuple(_coerce(t, v, f"{path}[{i}]") for i, (t, v) in enumerate(zip(template, value)))
    if isinstance(template, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported config field type {type(template).__name__}")


def _from_dict(cls: type, data: dict, path: str = "") -> Any:
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        kwargs[key] = _coerce(getattr(defaults, key), value, sub)
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    """Build a validated PipelineConfig from a parsed JSON document."""
    cfg = _from_dict(PipelineConfig, data)
    cfg.validate()
    return cfg


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def apply_override(cfg: PipelineConfig, dotted_key: str, raw_value: str) -> PipelineConfig:
    """Apply one ``a.b.c=value`` style override; value parsed as JSON, else string."""
    import json

    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    data = config_to_dict(cfg)
    node: Any = data
    parts = dotted_key.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted_key!r}")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted_key!r}")
    node[parts[-1]] = value
    return config_from_dict(data)
