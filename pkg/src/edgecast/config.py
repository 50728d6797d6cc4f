"""Run configuration: a YAML document validated against a strict schema.

Every section and key is optional; omitted values take the defaults below.
Unknown keys are rejected. ``EDGECAST_OUTPUT_DIR`` overrides ``output_dir``.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__

OUTPUT_ENV = "EDGECAST_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Section):
    path: Optional[str] = "data/ml-100k"
    format: Literal["ml-100k", "ml-1m", "csv"] = "ml-100k"
    like_threshold: float = Field(4.0, ge=1, le=5)
    train_fraction: float = Field(0.8, gt=0, lt=1)
    # share of the training split held back for early stopping
    validation_fraction: float = Field(0.1, gt=0, lt=1)
    split_seed: int = 0


class ModelSection(_Section):
    k: int = Field(16, ge=1)
    hidden: list[int] = [32, 16]
    learning_rate: float = Field(0.01, gt=0)
    batch_size: int = Field(256, ge=1)
    max_epochs: int = Field(50, ge=1)
    patience: int = Field(1, ge=1)
    seed: int = 0
    init_scale: float = Field(0.01, gt=0)
    merge: Literal["sum", "concat"] = "sum"
    dense_scale: Literal["std", "variance"] = "std"
    # pseudo-ratings at the global mean added to per-user / per-video means
    rating_prior: float = Field(10.0, ge=0)
    weights: Optional[str] = None

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("hidden sizes must be positive")
        return v


class ChannelSection(_Section):
    bandwidth_hz: float = Field(50e6, gt=0)
    noise_dbm_per_hz: float = -130.0
    block_s: float = Field(0.1, gt=0)
    power_dbm: float = 100.0
    distance_range_m: tuple[float, float] = (15.0, 20.0)
    ref_loss_db: float = 30.0
    path_loss_exponent: float = Field(2.0, gt=0)

    @field_validator("distance_range_m")
    @classmethod
    def _range(cls, v):
        if not 1.0 <= v[0] <= v[1]:
            raise ValueError("distance range must satisfy 1 <= low <= high")
        return v


class DelaySection(_Section):
    target_s: float = Field(0.2, gt=0)
    violation: float = Field(1e-3, gt=0, lt=1)
    cloud_delay_s: float = Field(0.1, ge=0)


class CachingSection(_Section):
    capacities: list[int] = [30, 60, 100]
    delta: float = Field(0.5, gt=0, lt=1)
    new_multiplier: int = Field(3, ge=1)
    request_mode: Literal["held-out", "predicted"] = "held-out"
    # "group": all members scored on all candidates; "pool": own pool only, zeros elsewhere
    scoring: Literal["group", "pool"] = "group"

    @field_validator("capacities")
    @classmethod
    def _caps(cls, v):
        if not v or any(e < 1 for e in v):
            raise ValueError("capacities must be a nonempty list of positive integers")
        return v


class AllocatorSection(_Section):
    phi_v: float = Field(1e3, gt=0)
    phi_b: float = Field(1e2, gt=0)


class ExperimentSection(_Section):
    users: list[int] = [50, 100, 300]
    seeds: list[int] = list(range(10))
    uhr_capacity: int = Field(100, ge=1)
    chr_users: int = Field(100, ge=1)
    delivery_capacity: int = Field(100, ge=1)
    rate_bandwidth_hz: float = Field(0.5e6, gt=0)
    rate_distance_m: float = Field(20.0, ge=1)
    rate_delays_s: list[float] = [0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 5.0, 10.0]
    rate_violations: list[float] = [1e-1, 1e-2, 1e-3, 1e-4]

    @field_validator("users")
    @classmethod
    def _users(cls, v):
        if not v or any(n < 1 for n in v):
            raise ValueError("users must be a nonempty list of positive integers")
        return v

    @field_validator("rate_violations")
    @classmethod
    def _probs(cls, v):
        if any(not 0 < e < 1 for e in v):
            raise ValueError("violation probabilities must lie in (0, 1)")
        return v


class SimulateSection(_Section):
    blocks: int = Field(1_000_000, ge=1)
    warmup: int = Field(10_000, ge=0)
    seed: int = 0
    power_dbm: Optional[float] = None
    bandwidths_hz: list[float] = [0.5e6, 1e6]
    distance_m: float = Field(20.0, ge=1)
    delays_s: list[float] = [0.1, 0.2, 0.5]
    violations: list[float] = [1e-1, 1e-2, 1e-3]

    @model_validator(mode="after")
    def _warmup(self):
        if self.blocks <= self.warmup:
            raise ValueError("blocks must exceed warmup")
        if any(not 0 < e < 1 for e in self.violations):
            raise ValueError("violation probabilities must lie in (0, 1)")
        return self


class ExperimentConfig(_Section):
    dataset: DatasetSection = DatasetSection()
    model: ModelSection = ModelSection()
    channel: ChannelSection = ChannelSection()
    delay: DelaySection = DelaySection()
    caching: CachingSection = CachingSection()
    allocator: AllocatorSection = AllocatorSection()
    experiment: ExperimentSection = ExperimentSection()
    simulate: SimulateSection = SimulateSection()
    output_dir: str = "runs"

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        """Short digest of the fully resolved configuration and package version."""
        text = f"{__version__}\n{self.canonical_json()}"
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def config_from_dict(data) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def parse_config(path=None) -> ExperimentConfig:
    """Load a YAML config; ``None`` or an empty file gives all defaults."""
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as err:
        raise ConfigError(f"{p}: invalid YAML: {err}") from None
    return config_from_dict(data)
