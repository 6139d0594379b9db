"""Run configuration: strict JSON sections and environment settings."""

import json
import logging
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .blocks import BlockKind, InitScheme, MapKind
from .errors import ConfigError, DomainError
from .ode import RhoKind
from .perturb import DEFAULT_ALPHA, AttackConfig, AttackKind, NoiseConfig, NoiseKind
from .seeding import named_seed

logger = logging.getLogger(__name__)

INIT_INTERVALS: list[tuple[float, float]] = [
    (0.00, 0.10),
    (0.10, 0.20),
    (0.20, 0.25),
    (0.25, 0.30),
    (0.30, 0.40),
]

Interval = tuple[float, float]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


def _check_interval(value: Interval) -> Interval:
    try:
        InitScheme(*value)
    except DomainError as e:
        raise ValueError(str(e)) from e
    return value


class ModelConfig(Section):
    kind: BlockKind = BlockKind.IN
    depth: int = Field(default=8, ge=1)
    width: int = Field(default=32, ge=1)
    lambda_init: Interval = (0.20, 0.25)
    map: MapKind = MapKind.DENSE
    num_classes: int | None = Field(default=None, ge=2)

    check_lambda_init = field_validator("lambda_init")(_check_interval)

    def init_scheme(self) -> InitScheme:
        return InitScheme(*self.lambda_init)


class DatasetConfig(Section):
    source: Literal["moons", "spirals", "idx"] = "moons"
    n: int = Field(default=400, ge=4)
    noise_sd: float = Field(default=0.1, ge=0.0)
    images: Path | None = None
    labels: Path | None = None
    limit: int | None = Field(default=None, ge=1)
    #: fixes jitter and the train/test split, so every run of a sweep sees the same test set
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _idx_paths(self):
        if self.source == "idx" and (self.images is None or self.labels is None):
            raise ValueError("idx datasets need both 'images' and 'labels' paths")
        return self


class TrainConfig(Section):
    epochs: int = Field(default=40, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr0: float = Field(default=0.1, gt=0.0)
    lr_drops: list[tuple[int, float]] = [(20, 10.0), (30, 10.0)]
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    dataset: DatasetConfig = DatasetConfig()
    test_fraction: float = Field(default=0.25, gt=0.0, lt=1.0)
    failure_patience: int = Field(default=10, ge=1)
    chance_margin: float = Field(default=1.0, ge=0.0)

    @field_validator("lr_drops")
    @classmethod
    def _sorted_drops(cls, drops: list[tuple[int, float]]) -> list[tuple[int, float]]:
        epochs = [epoch for epoch, _ in drops]
        if epochs != sorted(epochs):
            raise ValueError(f"lr_drops must be sorted by epoch, got {epochs}")
        if any(divisor <= 0 for _, divisor in drops):
            raise ValueError("lr_drops divisors must be > 0")
        return drops

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        """Full-scale optimizer protocols: ``cifar10``, ``cifar100`` and ``resnext``."""
        presets = {
            "cifar10": dict(epochs=160, batch_size=128, lr0=0.1, lr_drops=[(80, 10.0), (120, 10.0)], weight_decay=1e-4),
            "cifar100": dict(epochs=300, batch_size=128, lr0=0.1, lr_drops=[(150, 10.0), (225, 10.0)], weight_decay=1e-4),
            "resnext": dict(epochs=300, batch_size=128, lr0=0.05, lr_drops=[(150, 10.0), (225, 10.0)], weight_decay=5e-4),
        }
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(presets)}", section="train")
        return cls(**{"momentum": 0.9, **presets[name], **overrides})


class AttackSweep(Section):
    kind: AttackKind
    epsilons: list[float] = Field(default=[1 / 255, 2 / 255, 4 / 255], min_length=1)
    alpha: float = Field(default=DEFAULT_ALPHA, gt=0.0)
    iters: int = Field(default=20, ge=1)

    def configs(self, seed: int) -> list[AttackConfig]:
        attack_seed = named_seed(seed, f"attack/{self.kind.value}")
        return [
            AttackConfig(
                kind=self.kind,
                epsilon=eps,
                alpha=min(self.alpha, 2 * eps) if eps > 0 else self.alpha,
                iters=self.iters,
                seed=attack_seed,
            )
            for eps in self.epsilons
        ]


def default_noise() -> list[NoiseConfig]:
    return [NoiseConfig(kind=kind) for kind in NoiseKind]


def default_attacks() -> list[AttackSweep]:
    return [AttackSweep(kind=kind) for kind in AttackKind]


class EvalConfig(Section):
    noise: list[NoiseConfig] = Field(default_factory=default_noise)
    attacks: list[AttackSweep] = Field(default_factory=default_attacks)
    max_samples: int | None = Field(default=None, ge=1)
    chunk_size: int = Field(default=64, ge=1)

    def noise_configs(self, seed: int) -> list[NoiseConfig]:
        """Noise configs whose seed is derived from the run seed unless set explicitly."""
        return [
            cfg if cfg.seed is not None else cfg.model_copy(update={"seed": named_seed(seed, cfg.label)})
            for cfg in self.noise
        ]

    def attack_configs(self, seed: int) -> list[AttackConfig]:
        return [cfg for sweep in self.attacks for cfg in sweep.configs(seed)]


class LandscapeConfig(Section):
    G: int = Field(default=10, ge=1)
    sample_index: int = Field(default=0, ge=0)
    step: float = Field(default=1 / 255, gt=0.0)
    noise: NoiseConfig | None = None


class OdeConfig(Section):
    lam: float = Field(default=0.7, ge=0.0, alias="lambda")
    rho: RhoKind = RhoKind.ONE
    dt: float = Field(default=1e-4, gt=0.0)
    T: float = Field(default=1.0, gt=0.0)


class StabilityConfig(Section):
    dynamics: str = "cubic"
    start: list[float] = [0.5, 0.5]
    lam: float = Field(default=0.5, ge=0.0, alias="lambda")
    rho: RhoKind = RhoKind.ONE


class SweepConfig(Section):
    intervals: list[Interval] = Field(default_factory=lambda: list(INIT_INTERVALS), min_length=2)
    seeds: list[int] = Field(default=[0, 1, 2, 3, 4], min_length=2)
    kinds: list[BlockKind] = [BlockKind.IN, BlockKind.LAMBDA_IN, BlockKind.IN_SIG, BlockKind.IN_GATING, BlockKind.IN_GATING_SIG]

    @field_validator("intervals")
    @classmethod
    def _valid_intervals(cls, intervals: list[Interval]) -> list[Interval]:
        return [_check_interval(i) for i in intervals]


class RunConfigFile(Section):
    seed: int = Field(ge=0)
    output_dir: Path
    model: ModelConfig | None = None
    train: TrainConfig | None = None
    eval: EvalConfig | None = None
    landscape: LandscapeConfig | None = None
    ode: OdeConfig | None = None
    stability: StabilityConfig | None = None
    sweep: SweepConfig | None = None

    @classmethod
    def load(cls, path: Path) -> "RunConfigFile":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.parse(raw)

    @classmethod
    def parse(cls, raw: dict) -> "RunConfigFile":
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            first = e.errors()[0]
            loc = first["loc"]
            section = str(loc[0]) if loc else None
            where = ".".join(str(part) for part in loc)
            raise ConfigError(f"{where}: {first['msg']}", section=section) from e

    def require(self, section: str):
        value = getattr(self, section)
        if value is None:
            raise ConfigError(f"missing required section '{section}'", section=section)
        return value

    def with_seed(self, seed: int) -> "RunConfigFile":
        return self.model_copy(update={"seed": seed})

    @property
    def run_dir(self) -> Path:
        return self.output_dir / f"seed{self.seed}"


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="DONET_", env_file=".env", extra="ignore")

    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    log_level: str | None = None


def load_settings() -> Settings:
    try:
        return Settings()
    except ValidationError as e:
        raise ConfigError(f"environment: {e.errors()[0]['msg']}", section="env") from e
