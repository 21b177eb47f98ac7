"""Run configuration: defaults, JSON files, overrides, strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

SCHEMA_VERSION = 1
LOSS_NAMES = ("sal", "ppda", "ram")


class ConfigError(ValueError):
    pass


class SchemaVersionError(ConfigError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.996
    lambda_sal: float = 0.10
    lambda_ppda: float = 0.05
    lambda_ram: float = 0.02
    losses: tuple[str, ...] = LOSS_NAMES
    symmetrize_spatial: bool = True
    seed: int = 0
    lr_schedule: str = "constant"
    # encoder
    input_size: int = 64
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    proj_dim: int = 64
    predictor_init: str = "identity"
    # spatial losses
    n_prototypes: int = 32
    tau: float = 0.1
    ppda_grid: int = 7
    ram_grid: int = 6
    # augmentation
    jitter: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    norm_mean: tuple[float, float, float] | None = None
    norm_std: tuple[float, float, float] | None = None
    dtype: str = "float32"
    log_augment: bool = True

    def __post_init__(self):
        for name in ("losses", "stage_channels", "jitter", "norm_mean", "norm_std"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(v))
        bad = set(self.losses) - set(LOSS_NAMES)
        if bad:
            raise ConfigError(f"unknown losses {sorted(bad)}")
        if self.base_lr <= 0 or self.weight_decay < 0 or self.batch_size < 2 or self.epochs < 0:
            raise ConfigError("rates and sizes must be positive")
        if not 0 < self.momentum < 1:
            raise ConfigError("EMA momentum must lie in (0, 1)")
        if min(self.lambda_sal, self.lambda_ppda, self.lambda_ram) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def lambdas(self) -> dict:
        """Loss weights after applying the enabled-loss subset."""
        raw = {"sal": self.lambda_sal, "ppda": self.lambda_ppda, "ram": self.lambda_ram}
        return {k: (v if k in self.losses else 0.0) for k, v in raw.items()}

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class DataConfig:
    pool_size: int = 2000
    modality: str = "fused"
    seed: int = 1234


@dataclass(frozen=True)
class ProbeConfig:
    task: str = "shape"
    n_samples: int = 1200
    data_seed: int = 99
    seed: int = 0
    classify_epochs: int = 100
    classify_lr: float = 0.02
    classify_momentum: float = 0.9
    regress_epochs: int = 200
    regress_lr: float = 0.01
    regress_weight_decay: float = 1e-2
    batch_size: int = 64


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "train": self.train.to_dict(),
            "data": asdict(self.data),
            "probe": asdict(self.probe),
        }


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return cls(**values)


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    version = d.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"schema_version {version!r} != {SCHEMA_VERSION}")
    unknown = set(d) - {"train", "data", "probe"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    return RunConfig(
        _build(TrainConfig, d.get("train", {}), "train"),
        _build(DataConfig, d.get("data", {}), "data"),
        _build(ProbeConfig, d.get("probe", {}), "probe"),
    )


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return from_dict(d)


def merge(base: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{"section.key": value}`` overrides on top of ``base``."""
    sections = {"train": base.train, "data": base.data, "probe": base.probe}
    grouped: dict[str, dict] = {}
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigError(f"bad override key {key!r}")
        grouped.setdefault(section, {})[name] = value
    for section, values in grouped.items():
        current = asdict(sections[section])
        current.update(values)
        sections[section] = _build(type(sections[section]), current, section)
    return RunConfig(**sections)


def dump(config: RunConfig, path) -> None:
    p = Path(path)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    tmp.replace(p)
