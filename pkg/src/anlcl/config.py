"""Training configuration: one JSON document with a strict schema."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, DataIOError, ParameterError
from .losses import ContrastiveConfig, LossWeights
from .networks import MomentumConfig, NetworkSpec
from .sampler import SamplerConfig

ENCODER_CHOICES = ("discriminator", "image_generator", "image_rain_generator")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    finetune_lr: float | None = None
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 4
    crop: int = 256
    downsample_factor: int = 1
    pretrain_iters: int = 1000
    finetune_iters: int = 1000
    seed: int = 0
    w_supervised: float = 1.0
    data_dir: str | None = None
    probe_count: int = 4
    encoder_choice: str = "discriminator"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    momentum: MomentumConfig = field(default_factory=MomentumConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ConfigError("lr: must be > 0")
        if self.finetune_lr is not None and (
                not isinstance(self.finetune_lr, (int, float)) or isinstance(self.finetune_lr, bool)
                or self.finetune_lr <= 0):
            raise ConfigError("finetune_lr: must be > 0 or null")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        for name in ("pretrain_iters", "finetune_iters"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if self.crop < 70 or self.crop % 4:
            raise ConfigError("crop: must be a multiple of 4 and at least 70")
        if self.encoder_choice not in ENCODER_CHOICES:
            raise ConfigError(f"encoder_choice: expected one of {ENCODER_CHOICES}")
        if self.probe_count < 1:
            raise ConfigError("probe_count: must be >= 1")

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, tuple):
                return [conv(x) for x in v]
            return v
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                out[f.name] = {k: conv(x) for k, x in dataclasses.asdict(v).items()}
            else:
                out[f.name] = conv(v)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _build(cls, data, "")

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        """Copy with dotted-key overrides, e.g. ``{"sampler.mode": "random"}``."""
        data = self.to_dict()
        for key, value in overrides.items():
            node = data
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config field '{key}'")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config field '{key}'")
            node[parts[-1]] = value
        return TrainConfig.from_dict(data)


_NUMERIC = (int, float)


def _check_type(name: str, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, _NUMERIC):
        ok = isinstance(value, _NUMERIC) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            ok = value.is_integer()
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config field '{name}' has invalid value {value!r}")


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{prefix.rstrip('.') or '<root>'}' must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config field '{prefix}{key}'")
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        name = prefix + key
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, name + ".")
            continue
        if default is not None:
            _check_type(name, default, value)
            if isinstance(default, int) and not isinstance(default, bool):
                value = int(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        if isinstance(exc, ParameterError):
            raise ConfigError(f"config section '{prefix.rstrip('.') or '<root>'}': {exc}") from exc
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section '{prefix.rstrip('.') or '<root>'}': {exc}") from exc


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return TrainConfig.from_dict(data)
