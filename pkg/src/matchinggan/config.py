"""Run configuration: one flat record, loadable from YAML/JSON, every field a CLI flag."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .discriminator import DiscriminatorConfig
from .errors import ConfigError
from .generator import GeneratorConfig


@dataclass
class TrainConfig:
    # objective
    lambda_r: float = 0.1
    lambda_m: float = 1.0
    k: int = 3
    # optimisation
    learning_rate: float = 1e-4
    betas: tuple = (0.5, 0.999)
    epochs: int = 200
    batch_episodes: int = 16
    d_steps_per_g_step: int = 1
    steps_per_epoch: int = 0  # 0: one pass over the seen images, in episodes
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0
    # data
    manifest: str = ""
    split: str = ""
    image_channels: int = 1
    resolution: int = 32
    validation_episodes: int = 64
    # architecture
    d_z: int = 128
    gen_channels: tuple = (64, 64, 128, 128)
    layers_per_block: int = 4
    skip_connections: int = 2
    shared_encoder: bool = True
    coefficient_mode: str = "matched"
    dropout: float = 0.2
    disc_channels: tuple = (64, 128, 256, 512, 1024)
    # outputs
    out: str = "runs/default"
    checkpoint_every: int = 10

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.gen_channels = tuple(int(c) for c in self.gen_channels)
        self.disc_channels = tuple(int(c) for c in self.disc_channels)

    def problems(self) -> list[str]:
        """Every validation failure, one message per field."""
        out = []
        if self.lambda_r < 0:
            out.append(f"lambda_r: must be >= 0, got {self.lambda_r}")
        if self.lambda_m < 0:
            out.append(f"lambda_m: must be >= 0, got {self.lambda_m}")
        if self.k < 1:
            out.append(f"k: must be >= 1, got {self.k}")
        if self.learning_rate <= 0:
            out.append(f"learning_rate: must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            out.append(f"epochs: must be >= 1, got {self.epochs}")
        if self.batch_episodes < 1:
            out.append(f"batch_episodes: must be >= 1, got {self.batch_episodes}")
        if self.d_steps_per_g_step < 1:
            out.append(f"d_steps_per_g_step: must be >= 1, got {self.d_steps_per_g_step}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            out.append(f"betas: need two values in [0, 1), got {self.betas}")
        if self.resolution % 16 or self.resolution < 16:
            out.append(f"resolution: must be a positive multiple of 16, got {self.resolution}")
        if self.image_channels not in (1, 3):
            out.append(f"image_channels: must be 1 or 3, got {self.image_channels}")
        if self.skip_connections not in (1, 2, 3):
            out.append(f"skip_connections: must be 1, 2 or 3, got {self.skip_connections}")
        if self.coefficient_mode not in ("matched", "random"):
            out.append(f"coefficient_mode: must be 'matched' or 'random', got {self.coefficient_mode!r}")
        if len(self.gen_channels) != 4:
            out.append(f"gen_channels: need four block widths, got {self.gen_channels}")
        if not self.disc_channels:
            out.append("disc_channels: need at least one stage")
        if not 0 <= self.dropout < 1:
            out.append(f"dropout: must be in [0, 1), got {self.dropout}")
        if self.grad_clip < 0:
            out.append(f"grad_clip: must be >= 0, got {self.grad_clip}")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        return self

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            image_channels=self.image_channels,
            resolution=self.resolution,
            d_z=self.d_z,
            channels=self.gen_channels,
            layers_per_block=self.layers_per_block,
            skip_connections=self.skip_connections,
            shared_encoder=self.shared_encoder,
            coefficient_mode=self.coefficient_mode,
            dropout=self.dropout,
        )

    def discriminator_config(self, num_classes: int) -> DiscriminatorConfig:
        return DiscriminatorConfig(self.image_channels, self.disc_channels, num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def replace(self, **overrides) -> "TrainConfig":
        return from_mapping({**self.to_dict(), **overrides})


FIELD_NAMES = tuple(f.name for f in fields(TrainConfig))


def parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    s = str(value).strip().lower()
    if s in ("true", "1", "yes", "on"):
        return True
    if s in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _coerce(name: str, value: Any):
    default = getattr(TrainConfig, name, None)
    if isinstance(default, bool):
        return parse_bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{name}: expected an integer, got {value}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if name in ("betas", "gen_channels", "disc_channels"):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        conv = float if name == "betas" else int
        return tuple(conv(v) for v in value)
    return str(value)


def from_mapping(data: Mapping[str, Any]) -> TrainConfig:
    """Build a config; unknown keys and unparsable values are all reported together."""
    problems, kwargs = [], {}
    for key, value in data.items():
        name = key.replace("-", "_")
        if name not in FIELD_NAMES:
            problems.append(f"{key}: unknown field")
            continue
        try:
            kwargs[name] = _coerce(name, value)
        except (ConfigError, TypeError, ValueError) as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return TrainConfig(**kwargs)


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> TrainConfig:
    """Defaults < file < overrides; the result is validated."""
    data: dict = {}
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must hold a mapping")
        data.update(loaded or {})
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return from_mapping(data).validate()


def config_digest(cfg: TrainConfig, exclude=("out",)) -> str:
    import hashlib

    d = {k: v for k, v in cfg.to_dict().items() if k not in exclude}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]
