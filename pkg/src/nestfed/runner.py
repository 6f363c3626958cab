"""Turns an :class:`ExperimentConfig` into datasets, submodels and a federation run."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, apply_baseline
from .data import Dataset, check_partition, gen_synthetic, load_cifar_binary, load_idx, partition_dirichlet, partition_iid
from .errors import ConfigError
from .federation import Federation, FederationConfig, RoundReport
from .models import ModelConfig
from .reporting import diagnostics_report, write_metrics
from .scaling import SubmodelSpec, derive_specs


@dataclass
class Experiment:
    config: ExperimentConfig
    model: ModelConfig
    specs: list[SubmodelSpec]
    fed_config: FederationConfig
    train: Dataset
    test: Dataset
    parts: list[np.ndarray]

    def federation(self) -> Federation:
        return Federation(self.model, self.specs, self.fed_config, self.train, self.test, self.parts,
                          self.config.federation.bn_consistent)


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.source == "synthetic":
        shape = d.dim
        if cfg.model.block_kind == "conv" and isinstance(shape, int):
            raise ConfigError("dataset.dim: conv models need an image shape [C, H, W]")
        return gen_synthetic(d.num_classes, d.n_per_class, shape, d.margin, cfg.seed, d.sigma)
    if d.source == "idx":
        return (load_idx(d.train_images, d.train_labels, d.num_classes, "train"),
                load_idx(d.test_images, d.test_labels, d.num_classes, "test"))
    return load_cifar_binary(d.path, d.num_classes)


def build_experiment(cfg: ExperimentConfig, seed: int | None = None) -> Experiment:
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    cfg = apply_baseline(cfg)
    train, test = load_data(cfg)
    shape = tuple(cfg.model.input_shape) if cfg.model.input_shape else train.input_shape
    if shape != train.input_shape:
        raise ConfigError(f"model.input_shape {list(shape)} does not match the data {list(train.input_shape)}")
    model = ModelConfig(cfg.model.block_kind, tuple(cfg.model.stages), shape, cfg.dataset.num_classes)
    s = cfg.scaling
    overrides = None
    if s.overrides is not None:
        overrides = [o.model_dump(exclude_none=True) if hasattr(o, "model_dump") else o for o in s.overrides]
    specs = derive_specs(model, s.gammas, s.policy, overrides, s.tolerance)
    f = cfg.federation
    fed = FederationConfig(
        T=f.rounds, M=f.clients, fraction=f.fraction, E=f.local_epochs, batch_size=f.batch_size, lr0=f.lr,
        schedule=tuple(f.lr_decay_points), decay=f.lr_decay, N_s=len(specs),
        tier_table=tuple(tuple(t) for t in f.tiers) if f.tiers else None, seed=cfg.seed,
        learnable_steps=f.learnable_steps, static_bn=f.static_bn, augment=f.augment, workers=f.workers,
    )
    if cfg.dataset.partition == "iid":
        parts = partition_iid(train, f.clients, cfg.seed)
    else:
        parts = partition_dirichlet(train, f.clients, cfg.dataset.alpha, cfg.seed)
    check_partition(parts, len(train))
    return Experiment(cfg, model, specs, fed, train, test, parts)


def run_config(cfg: ExperimentConfig, out_dir=None, seed: int | None = None, rounds: int | None = None,
               progress=None) -> tuple[list[RoundReport], Federation]:
    """Run the experiment and write metrics (and diagnostics) to ``out_dir``."""
    exp = build_experiment(cfg, seed)
    fed = exp.federation()
    reports = fed.run(rounds, progress)
    out = Path(out_dir if out_dir is not None else exp.config.output.dir)
    write_metrics(reports, out)
    if exp.config.output.diagnostics:
        diagnostics_report(fed.store, exp.specs, out)
    return reports, fed
