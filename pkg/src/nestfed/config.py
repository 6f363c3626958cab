"""JSON experiment configuration."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

BASELINES = ("nested", "heterofl", "fjord", "depthfl")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    block_kind: Literal["mlp", "conv"] = "mlp"
    stages: list[tuple[int, int]] = Field(default_factory=lambda: [(2, 16), (2, 32), (2, 64)])
    input_shape: Optional[list[int]] = None  # taken from the dataset when omitted


class OverrideEntry(_Section):
    stages: Optional[list[list[float]]] = None
    gamma_W: float = 1.0
    gamma_D: Optional[float] = None


class ScalingSection(_Section):
    policy: Literal["W", "D", "D_O", "WD"] = "WD"
    gammas: list[float] = Field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])
    overrides: Optional[list[Union[None, OverrideEntry, list[list[float]]]]] = None
    tolerance: float = Field(0.1, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.overrides is not None and len(self.overrides) != len(self.gammas):
            raise ValueError(f"overrides has {len(self.overrides)} entries for {len(self.gammas)} gammas")
        return self


class FederationSection(_Section):
    rounds: int = Field(100, ge=0)
    clients: int = Field(100, ge=1)
    fraction: float = Field(0.1, gt=0, le=1)
    local_epochs: int = Field(5, ge=0)
    batch_size: int = Field(32, ge=2)
    lr: float = Field(0.1, ge=0)
    lr_decay_points: list[float] = Field(default_factory=lambda: [0.5, 0.75])
    lr_decay: float = Field(0.1, gt=0)
    tiers: Optional[list[list[int]]] = None
    learnable_steps: bool = True
    bn_consistent: bool = False
    static_bn: bool = False
    augment: bool = True
    workers: int = Field(1, ge=1)


class DatasetSection(_Section):
    source: Literal["synthetic", "idx", "cifar"] = "synthetic"
    num_classes: int = Field(10, ge=2)
    # synthetic
    n_per_class: int = Field(120, ge=6)
    dim: Union[int, list[int]] = 32
    margin: float = Field(8.0, gt=0)
    sigma: float = Field(1.0, gt=0)
    # files
    path: Optional[str] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    # partition
    partition: Literal["iid", "dirichlet"] = "iid"
    alpha: float = Field(0.5, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.source == "cifar" and not self.path:
            raise ValueError("source 'cifar' needs 'path' (directory of .bin files)")
        if self.source == "idx":
            missing = [f for f in ("train_images", "train_labels", "test_images", "test_labels")
                       if getattr(self, f) is None]
            if missing:
                raise ValueError(f"source 'idx' needs {missing}")
        return self


class OutputSection(_Section):
    dir: str = "runs/default"
    diagnostics: bool = True


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0)
    baseline: Literal["nested", "heterofl", "fjord", "depthfl"] = "nested"
    model: ModelSection = Field(default_factory=ModelSection)
    scaling: ScalingSection = Field(default_factory=ScalingSection)
    federation: FederationSection = Field(default_factory=FederationSection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def _check(self):
        n = len(self.scaling.gammas)
        for i, tier in enumerate(self.federation.tiers or []):
            if not tier:
                raise ValueError(f"federation.tiers[{i}] is empty")
            bad = [k for k in tier if not 1 <= k <= n]
            if bad:
                raise ValueError(f"federation.tiers[{i}] names submodel(s) {bad}; valid indices are 1..{n}")
        return self

    @property
    def n_submodels(self) -> int:
        return len(self.scaling.gammas)


def apply_baseline(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fold a named baseline into the scaling and federation settings."""
    scaling = cfg.scaling.model_copy()
    fed = cfg.federation.model_copy()
    if cfg.baseline == "heterofl":
        scaling.policy, fed.learnable_steps, fed.bn_consistent, fed.static_bn = "W", False, True, True
    elif cfg.baseline == "fjord":
        scaling.policy, fed.learnable_steps, fed.bn_consistent = "W", False, False
    elif cfg.baseline == "depthfl":
        scaling.policy, fed.learnable_steps = "D", False
    return cfg.model_copy(update={"scaling": scaling, "federation": fed})


def _field_path(err) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(f"{_field_path(first)}: {first['msg']}") from exc


def parse_config(path) -> ExperimentConfig:
    """Read, validate and default-fill a JSON config; unknown keys are errors."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(raw)
