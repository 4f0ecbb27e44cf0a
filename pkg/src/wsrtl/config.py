"""Declarative run configuration.

A run is described by one TOML file with four tables (``[model]``,
``[train]``, ``[data]``, ``[synthetic]``). Every field has a default, so an
empty file is a valid config. Command-line overrides use dotted keys, e.g.
``train.seed=7``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised for unknown keys, bad types or out-of-range values."""


@dataclass
class ModelConfig:
    n_aus: int = 12
    # channel multiplier for the ResNet-18 trunk and all conv heads
    width: float = 1.0
    input_size: int = 192
    d_model: int = 128
    n_heads: int = 8
    ffn_dim: int = 512
    # fused-map channels at width 1; scaled by `width`
    fused_channels: int = 256
    roi_size: int = 6
    patch_size: int = 48
    # widest layer of D/C (first layer is disc_channels/8) and of G's seed layer
    disc_channels: int = 1024
    gen_channels: int = 1024
    flow_channels: int = 256

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width)))

    def validate(self) -> None:
        if self.n_aus < 1:
            raise ConfigError("model.n_aus must be >= 1")
        if self.width <= 0:
            raise ConfigError("model.width must be > 0")
        if self.input_size % 32:
            raise ConfigError("model.input_size must be a multiple of 32")
        if self.d_model % self.n_heads:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        if self.roi_size > self.input_size // 4:
            raise ConfigError("model.roi_size exceeds the fused map")
        if self.patch_size != 48:
            raise ConfigError("model.patch_size: only 48 is supported by the generator")


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda_f: float = 0.2
    lambda_u: float = 1.0
    temperature: float = 0.5
    mixup_alpha: float = 0.75
    # label-guess passes averaged per unlabeled sample; 1 = single pass
    guess_passes: int = 1
    flow_step: int = 3
    seed: int = 0
    use_semi: bool = True
    use_roii: bool = True
    use_ofe: bool = True
    augment: bool = True
    eval_every: int = 100
    checkpoint_every: int = 500
    # stop once training-set average F1 reaches this value (None = never)
    target_f1: float | None = None

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError("train.iterations must be >= 0")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("train.batch_size must be an even number >= 2")
        if not 0 < self.temperature <= 1:
            raise ConfigError("train.temperature must lie in (0, 1]")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.guess_passes < 1:
            raise ConfigError("train.guess_passes must be >= 1")
        for name in ("lambda1", "lambda2", "lambda_f", "lambda_u"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")


@dataclass
class DataConfig:
    # JSON-lines manifest; empty means "generate from [synthetic]"
    manifest: str = ""
    # AU rule table (JSON) for manifest data; the synthetic table otherwise
    rule_table: str = ""
    # reference landmarks ("x y" text); when set, manifest images get aligned
    reference_landmarks: str = ""
    # treat labels as intensities and binarise with `label > threshold`
    intensity_threshold: float | None = None
    aligned_size: int = 200
    k_folds: int = 3
    # 1-based fold index; 0 trains on every subject
    fold: int = 0

    def validate(self) -> None:
        if self.k_folds < 2:
            raise ConfigError("data.k_folds must be >= 2")
        if not 0 <= self.fold <= self.k_folds:
            raise ConfigError("data.fold must lie in [0, k_folds]")
        if self.manifest and not self.rule_table:
            raise ConfigError("data.rule_table is required with data.manifest")


@dataclass
class SyntheticConfig:
    n_subjects: int = 8
    samples_per_subject: int = 16
    image_size: int = 200
    # fraction of each subject's samples that lose their labels
    unlabeled_fraction: float = 0.5
    cooccur_pairs: list[list[int]] = field(default_factory=lambda: [[0, 1]])
    exclusive_pairs: list[list[int]] = field(default_factory=lambda: [[2, 3]])
    # AU index -> (dx, dy) displacement applied between the frame pair
    motion: dict[str, list[int]] = field(default_factory=lambda: {"4": [0, 2]})
    positive_rate: float = 0.5
    force_labels: list[int] | None = None
    seed: int = 0


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def validate(self) -> "Config":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return _digest(self.to_dict())

    def model_hash(self) -> str:
        return _digest(dataclasses.asdict(self.model))


def _digest(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "synthetic": SyntheticConfig}


def _coerce(section: str, key: str, value: Any, current: Any) -> Any:
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{section}.{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(current, (int, float)) and isinstance(value, str):
        try:
            return type(current)(value)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected {type(current).__name__}, got {value!r}") from None
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    if isinstance(current, tuple):
        return tuple(value)
    if type(current) is int and isinstance(value, float):
        raise ConfigError(f"{section}.{key}: expected int, got {value!r}")
    return value


def _apply(cfg: Config, section: str, key: str, value: Any) -> None:
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    part = getattr(cfg, section)
    names = {f.name for f in fields(part)}
    if key not in names:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(part, key, _coerce(section, key, value, getattr(part, key)))


def from_dict(data: dict[str, Any]) -> Config:
    cfg = Config()
    for section, values in data.items():
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in values.items():
            _apply(cfg, section, key, value)
    return cfg.validate()


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    """Read a TOML config and apply ``section.key=value`` overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return apply_overrides(from_dict(data), overrides or [])


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply ``section.key=value`` strings (values parsed as JSON when possible)."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        try:
            value: Any = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _apply(cfg, section, key, value)
    return cfg.validate()
