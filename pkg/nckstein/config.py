"""Configuration utilities and models."""

from __future__ import annotations

import os
from enum import Enum
from pathlib import Path
from typing import Literal, Sequence

import yaml
from pydantic import BaseModel, Field, model_validator

from .distributions import GaussianMixture
from .errors import ConfigError
from .kernels import BandwidthRule, KernelSpec
from .samplers import InitConfig, NoiseSchedule, SamplerConfig
from .score_learning import TrainConfig

CONFIG_PATH = Path(__file__).resolve().parent.parent / "config.yaml"
OUTPUT_ROOT_ENV_VAR = "NCKSTEIN_OUTPUT_ROOT"


class MethodName(str, Enum):
    """Samplers available to the comparison matrix."""

    SGLD = "sgld"
    SVGD = "svgd"
    A_SGLD = "a-sgld"
    A_SVGD = "a-svgd"
    NCK_SVGD = "nck-svgd"


class ComponentSpec(BaseModel):
    weight: float = Field(ge=0)
    mean: list[float]
    variance: float = Field(1.0, gt=0)


def _default_components() -> list[ComponentSpec]:
    return [
        ComponentSpec(weight=0.2, mean=[-5.0, -5.0]),
        ComponentSpec(weight=0.8, mean=[5.0, 5.0]),
    ]


class TargetConfig(BaseModel):
    """Either an analytic mixture or a particle file of real samples."""

    components: list[ComponentSpec] | None = Field(default_factory=_default_components)
    dataset: Path | None = None

    @model_validator(mode="after")
    def _one_source(self) -> "TargetConfig":
        if self.dataset is not None:
            self.components = None
        if not self.components and self.dataset is None:
            raise ValueError("target needs components or a dataset")
        return self

    @property
    def analytic(self) -> bool:
        return self.components is not None

    def mixture(self) -> GaussianMixture:
        """The configured components as a normalised mixture."""
        if self.components is None:
            raise ConfigError("target is a dataset, not an analytic mixture")
        return GaussianMixture.from_components(
            [(c.weight, c.mean, c.variance) for c in self.components]
        )


class ScheduleConfig(BaseModel):
    sigma_max: float = Field(20.0, gt=0)
    sigma_min: float = Field(1.0, gt=0)
    levels: int = Field(10, ge=1)

    def build(self) -> NoiseSchedule:
        """Geometric schedule from these settings."""
        return NoiseSchedule.geometric(self.sigma_max, self.sigma_min, self.levels)


IMAGE_SCHEDULE = ScheduleConfig(sigma_max=1.0, sigma_min=0.01, levels=10)


class GridConfig(BaseModel):
    low: float = -10.0
    high: float = 10.0
    resolution: int = Field(101, ge=2)


def _default_sweep_kernel() -> KernelSpec:
    return KernelSpec(bandwidth=BandwidthRule.MEDIAN_SQUARED)


def _default_samplers() -> dict[MethodName, SamplerConfig]:
    return {
        MethodName.SGLD: SamplerConfig(epsilon=0.1, steps=1000),
        MethodName.SVGD: SamplerConfig(epsilon=0.5, steps=1000),
        MethodName.A_SGLD: SamplerConfig(epsilon=0.1, steps=100),
        MethodName.A_SVGD: SamplerConfig(epsilon=4.0, steps=100),
        MethodName.NCK_SVGD: SamplerConfig(epsilon=4.0, steps=100),
    }


class ExperimentConfig(BaseModel):
    """Everything one experiment run needs; echoed verbatim into its record."""

    target: TargetConfig = Field(default_factory=TargetConfig)
    dims: list[int] = Field(default_factory=lambda: [2, 4, 8, 16, 32, 64])
    placement: Literal["literal", "scaled"] = "literal"
    sweep_weights: list[float] = Field(default_factory=lambda: [0.2, 0.8])
    sweep_reference: Literal["final_level", "data"] = "final_level"
    sweep_kernel: KernelSpec | None = Field(default_factory=_default_sweep_kernel)
    methods: list[MethodName] = Field(default_factory=lambda: list(MethodName))
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    samplers: dict[MethodName, SamplerConfig] = Field(default_factory=_default_samplers)
    kernel: KernelSpec = Field(default_factory=KernelSpec)
    init: InitConfig = Field(default_factory=InitConfig)
    n_particles: int = Field(1024, ge=1)
    reference_size: int = Field(1024, ge=2)
    reference_mode: Literal["target", "particles"] = "target"
    n_real: int = Field(1024, ge=2)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    metrics: list[Literal["mmd", "precision_recall", "occupancy", "ksd"]] = Field(
        default_factory=lambda: ["mmd", "precision_recall", "occupancy"]
    )
    mmd_unbiased: bool = True
    k_neighbors: int = Field(3, ge=1)
    betas: list[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    beta_target: Literal["four_mode", "target"] = "four_mode"
    grid: GridConfig = Field(default_factory=GridConfig)
    matched_compute: bool = False
    keep_level_snapshots: bool = False
    training: TrainConfig = Field(default_factory=TrainConfig)
    train_samples: int = Field(10000, ge=1)
    output_dir: Path | None = None

    def sampler(self, method: MethodName) -> SamplerConfig:
        """Sampler settings for ``method`` with the shared particle count applied."""
        base = self.samplers.get(method) or _default_samplers()[method]
        update: dict = {"n": self.n_particles}
        if self.matched_compute:
            budget = self.sampler_budget()
            annealed = method in (MethodName.A_SGLD, MethodName.A_SVGD, MethodName.NCK_SVGD)
            update["steps"] = budget if annealed else budget * self.schedule.levels
        return base.model_copy(update=update)

    def sampler_budget(self) -> int:
        """Steps per level of NCK-SVGD, the budget matched by the other methods."""
        nck = self.samplers.get(MethodName.NCK_SVGD) or _default_samplers()[MethodName.NCK_SVGD]
        return nck.steps

    def train_config(self) -> TrainConfig:
        """Training settings sharing the sampling noise schedule."""
        return self.training.model_copy(
            update={
                "sigma_max": self.schedule.sigma_max,
                "sigma_min": self.schedule.sigma_min,
                "levels": self.schedule.levels,
            }
        )


def load_config(path: Path | None = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Load configuration from YAML file, applying ``section.key=value`` overrides."""
    path = path or CONFIG_PATH
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    apply_overrides(data, overrides)
    return ExperimentConfig(**data)


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Set dotted keys in ``data``; values keep YAML typing."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {part!r} is not a section")
            node = child
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def output_root() -> Path:
    """Default output root, taken from the environment."""
    return Path(os.getenv(OUTPUT_ROOT_ENV_VAR, "results"))
