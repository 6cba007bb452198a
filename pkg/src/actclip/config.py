"""Run configuration: nested dataclasses loaded from TOML or JSON, with dotted-key overrides."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .synth_data import DEFAULT_ACTIONS, DEFAULT_OBJECTS, DEFAULT_SUBJECTS


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class SeedConfig:
    data: int = 0
    model: int = 0
    sampling: int = 0
    encoder: int = 0


@dataclass
class DataConfig:
    subjects: list = field(default_factory=lambda: list(DEFAULT_SUBJECTS))
    actions: list = field(default_factory=lambda: list(DEFAULT_ACTIONS))
    objects: list = field(default_factory=lambda: list(DEFAULT_OBJECTS))
    num_frames: int = 24
    height: int = 32
    width: int = 32
    clips_per_triplet: int = 2
    holdout_fraction: float = 0.1
    out_dir: str = "runs/data"
    manifest: str = ""

    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.out_dir) / "manifest.jsonl"


@dataclass
class ModelConfig:
    d: int = 64
    d_t: int = 64
    d_b: int = 32
    d_v: int = 64
    n_frames: int = 16
    temporal_heads: int = 4
    temporal_layers: int = 2
    max_relative_distance: int = 8
    attention_heads: int = 4
    attention_mode: str = "single"
    text_buckets: int = 4096


@dataclass
class LossConfig:
    disent: float = 0.5
    aux: float = 0.5
    ortho: float = 1.0
    recomb: float = 0.5
    alpha_subject: float = 1.0
    alpha_action: float = 1.0
    alpha_object: float = 1.0
    tau_init: float = 0.07
    tau_min: float = 0.01
    tau_max: float = 1.0
    shared_temperature: bool = True
    ortho_mode: str = "squared"
    symmetric_clip: bool = False


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 2000
    lr: float = 3e-4
    optimizer: str = "sgd"
    weight_decay: float = 1e-4
    momentum: float = 0.0
    warmup_steps: int = 0
    setting_step: int = 50
    recomb_samples: int = 16
    class_balanced: bool = False
    checkpoint_every: int = 0
    out_dir: str = "runs/train"
    deterministic: bool = True


@dataclass
class RunConfig:
    seeds: SeedConfig = field(default_factory=SeedConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        m, t, l = self.model, self.train, self.loss
        checks = [
            ("model.n_frames", m.n_frames >= 2, "must be >= 2"),
            ("train.batch_size", t.batch_size >= 2, "must be >= 2 (contrastive losses need negatives)"),
            ("train.steps", t.steps >= 1, "must be >= 1"),
            ("train.setting_step", t.setting_step >= 1, "must be >= 1"),
            ("train.optimizer", t.optimizer in ("sgd", "adamw"), "must be 'sgd' or 'adamw'"),
            ("model.d", m.d % m.temporal_heads == 0, "must be divisible by model.temporal_heads"),
            ("model.d_v", m.d_v % m.attention_heads == 0, "must be divisible by model.attention_heads"),
            ("model.attention_mode", m.attention_mode in ("single", "tokens"), "must be 'single' or 'tokens'"),
            ("loss.ortho_mode", l.ortho_mode in ("squared", "signed"), "must be 'squared' or 'signed'"),
            ("loss.tau_init", 0 < l.tau_min <= l.tau_init <= l.tau_max, "must lie in [tau_min, tau_max]"),
            ("data.holdout_fraction", 0 <= self.data.holdout_fraction < 1, "must lie in [0, 1)"),
        ]
        for name in ("disent", "aux", "ortho", "recomb", "alpha_subject", "alpha_action", "alpha_object"):
            checks.append((f"loss.{name}", getattr(l, name) >= 0, "must be nonnegative"))
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(key, message)
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(key: str, current: Any, value: Any) -> Any:
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    try:
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            if isinstance(value, str):
                value = json.loads(value) if value.startswith("[") else [v for v in value.split(",") if v]
            return [str(v) for v in value]
        return str(value)
    except (TypeError, ValueError, json.JSONDecodeError):
        raise ConfigError(key, f"cannot interpret {value!r} as {type(current).__name__}") from None


def _merge(obj, data: dict, prefix: str = "") -> None:
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a table")
    names = {f.name for f in fields(obj)}
    for key, value in data.items():
        path = prefix + key
        if key not in names:
            raise ConfigError(path, "unknown configuration key")
        current = getattr(obj, key)
        if is_dataclass(current):
            _merge(current, value, path + ".")
        else:
            setattr(obj, key, _coerce(path, current, value))


def from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    _merge(cfg, data)
    return cfg.validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(str(path), f"parse error: {exc}") from None
    return from_dict(data)


def config_keys(obj=None, prefix: str = "") -> list[str]:
    obj = RunConfig() if obj is None else obj
    keys = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value):
            keys += config_keys(value, prefix + f.name + ".")
        else:
            keys.append(prefix + f.name)
    return keys


def apply_override(cfg: RunConfig, key: str, value: Any) -> None:
    parts = key.split(".")
    obj = cfg
    for i, part in enumerate(parts):
        if not is_dataclass(obj) or part not in {f.name for f in fields(obj)}:
            raise ConfigError(key, "unknown configuration key")
        if i == len(parts) - 1:
            current = getattr(obj, part)
            if is_dataclass(current):
                raise ConfigError(key, "cannot assign a whole section")
            setattr(obj, part, _coerce(key, current, value))
        else:
            obj = getattr(obj, part)
