"""Experiment configuration: TOML schema, strict validation, defaults, seed streams."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .losses import LossWeights

SCHEMA_VERSION = 1


class ConfigError(Exception):
    """Configuration file is malformed, unknown-keyed, or inconsistent."""


@dataclass
class DatasetConfig:
    root: str = "data/desk"
    train_per_class: int = 250
    test_per_class: int = 60
    image_size: int = 32


@dataclass
class ZooPgdConfig:
    norm: str = "linf"
    epsilon: float = 16 / 255
    steps: int = 5
    step_fraction: float = 3.0  # step size = epsilon / step_fraction
    random_start: bool = True


@dataclass
class ZooConfig:
    dir: str = "runs/zoo"
    architectures: list = field(default_factory=lambda: ["tinynet", "widenet", "deepnet"])
    robust: list = field(default_factory=lambda: ["tinynet", "widenet"])
    epochs: int = 12
    batch_size: int = 128
    lr: float = 1e-3
    augment: bool = True
    source_model: str = "tinynet"
    pgd: ZooPgdConfig = field(default_factory=ZooPgdConfig)


@dataclass
class PlacementConfig:
    mode: str = "gradcam"  # or "fixed"
    fixed_top: int = 0
    fixed_left: int = 0
    patch_height: int = 6
    patch_width: int = 6
    point: str = "last"


@dataclass
class PyramidConfig:
    r: float = 0.75
    scales: int = 2
    min_size: int = 8


@dataclass
class WeightsConfig:
    gan: float = 0.1
    rec: float = 10.0
    tv: float = 1e-4
    nps: float = 0.0
    margin: float = 8.0
    gradient_penalty: float = 10.0

    def to_loss_weights(self, print_mode: bool = False) -> LossWeights:
        nps = self.nps
        if print_mode and nps == 0.0:
            nps = 0.01
        return LossWeights(
            gan=self.gan,
            rec=self.rec,
            tv=self.tv,
            nps=nps,
            margin=self.margin,
            gradient_penalty=self.gradient_penalty,
        )


@dataclass
class ScheduleConfig:
    iterations: int = 300
    critic_steps: int = 3
    generator_steps: int = 3
    lr: float = 5e-4
    noise_amp: float = 0.1


@dataclass
class AttackConfig:
    mode: str = "untargeted"  # or "targeted"
    target: str = ""  # class name or index, resolved against the dataset labels
    samples: int = 100


@dataclass
class EvalConfig:
    angles: list = field(default_factory=lambda: [-30.0, -15.0, 0.0, 15.0, 30.0])
    distances: list = field(default_factory=lambda: [1.0, 2.0, 3.0])
    jitter: float = 0.1
    pgd_epsilon_8bit: float = 8.0
    pgd_steps: int = 40
    direct_patch_steps: int = 300
    noise_samples: int = 30


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    zoo: ZooConfig = field(default_factory=ZooConfig)
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def resolved(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        canonical = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version {self.schema_version} unsupported (expected {SCHEMA_VERSION})"
            )
        if self.placement.mode not in ("gradcam", "fixed"):
            raise ConfigError(f"placement.mode must be gradcam or fixed, got {self.placement.mode!r}")
        if self.attack.mode not in ("untargeted", "targeted"):
            raise ConfigError(f"attack.mode must be untargeted or targeted, got {self.attack.mode!r}")
        if not 0.0 < self.pyramid.r < 1.0:
            raise ConfigError(f"pyramid.r must be in (0, 1), got {self.pyramid.r}")
        if self.zoo.source_model not in self.zoo.architectures:
            raise ConfigError(
                f"zoo.source_model {self.zoo.source_model!r} not in architectures"
            )
        for arch in self.zoo.robust:
            if arch not in self.zoo.architectures:
                raise ConfigError(f"zoo.robust entry {arch!r} not in architectures")


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a table, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} under {path or 'top level'}")
    kwargs = {}
    for name, value in data.items():
        nested = _NESTED.get((cls, name))
        if nested is not None:
            kwargs[name] = _build(nested, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetConfig,
    (ExperimentConfig, "zoo"): ZooConfig,
    (ExperimentConfig, "placement"): PlacementConfig,
    (ExperimentConfig, "pyramid"): PyramidConfig,
    (ExperimentConfig, "weights"): WeightsConfig,
    (ExperimentConfig, "schedule"): ScheduleConfig,
    (ExperimentConfig, "attack"): AttackConfig,
    (ExperimentConfig, "evaluation"): EvalConfig,
    (ZooConfig, "pgd"): ZooPgdConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error in {path}: {exc}") from exc
    return config_from_dict(data)


def write_snapshot(cfg: ExperimentConfig, run_dir: Path) -> Path:
    """Resolved config (defaults expanded) recorded next to the run's outputs."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "config.resolved.json"
    out.write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    return out
