"""Experiment configuration, loaded from a JSON document with the same nesting.

Example::

    {
      "seed": 0,
      "dataset": {"kind": "synthetic", "synthetic": "blobs", "n": 300, "noise": 0.6},
      "arch": {"width": 16, "blocks": 2},
      "optimizer": {"name": "adam", "lr": 0.0025},
      "schedule": {"iterations": 2000, "batch_size": 64},
      "phases": {"mode": "two_step", "order": "BABW", "step1_wd": 5e-6, "step2_wd": 0.0},
      "log_interval": 100,
      "out_dir": "runs/demo"
    }

``BINOPT_SEED`` in the environment overrides ``seed``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field


@dataclass
class DatasetConfig:
    kind: str = "synthetic"              # synthetic | idx
    synthetic: str = "blobs"             # blobs | moons
    n: int = 300                         # samples per class
    noise: float = 0.6
    classes: int = 4
    image_size: int = 8
    images_path: str | None = None
    labels_path: str | None = None
    val_fraction: float = 0.1


@dataclass
class ArchConfig:
    width: int = 32
    blocks: int = 4
    pool_grid: int = 2
    binarize_first_last: bool = False
    weight_grad_mode: str = "ste_scaled"


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float | None = None              # None: per-optimizer training default
    decoupled: bool = False
    hyper: dict = field(default_factory=dict)


@dataclass
class ScheduleConfig:
    iterations: int = 5000
    batch_size: int = 64
    lr_decay: str = "linear"             # linear | constant


@dataclass
class PhaseConfig:
    mode: str = "one_step"               # one_step | two_step
    # one_step
    weight_decay: float = 5e-6
    binarize_weights: bool = True
    binarize_activations: bool = True
    # two_step
    order: str = "BABW"                  # BABW | BWBA
    step1_wd: float = 5e-6
    step2_wd: float = 0.0
    step1_iters: int | None = None       # None: half of schedule.iterations
    step2_iters: int | None = None


@dataclass
class TrainingConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    phases: PhaseConfig = field(default_factory=PhaseConfig)
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 0         # 0: only at phase ends
    out_dir: str = "runs/default"

    def validate(self):
        if self.schedule.iterations <= 0:
            raise ValueError("schedule.iterations must be positive")
        if self.schedule.batch_size <= 0:
            raise ValueError("schedule.batch_size must be positive")
        if self.log_interval <= 0:
            raise ValueError("log_interval must be positive")
        if self.phases.mode not in ("one_step", "two_step"):
            raise ValueError(f"unknown phase mode {self.phases.mode!r}")
        if self.phases.order not in ("BABW", "BWBA"):
            raise ValueError(f"unknown two-step order {self.phases.order!r}")
        if self.dataset.kind not in ("synthetic", "idx"):
            raise ValueError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.dataset.kind == "idx" and not (self.dataset.images_path and self.dataset.labels_path):
            raise ValueError("idx dataset needs images_path and labels_path")
        for it in (self.phases.step1_iters, self.phases.step2_iters):
            if it is not None and it <= 0:
                raise ValueError("phase iterations must be positive")
        return self

    def phase_plan(self):
        """List of (name, iterations, binarize_weights, binarize_activations, weight_decay)."""
        p = self.phases
        if p.mode == "one_step":
            return [("main", self.schedule.iterations, p.binarize_weights,
                     p.binarize_activations, p.weight_decay)]
        it1 = p.step1_iters or max(self.schedule.iterations // 2, 1)
        it2 = p.step2_iters or max(self.schedule.iterations - it1, 1)
        if p.order == "BABW":
            step1 = ("step1", it1, False, True, p.step1_wd)
        else:
            step1 = ("step1", it1, True, False, p.step1_wd)
        return [step1, ("step2", it2, True, True, p.step2_wd)]

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        """Copy with top-level or dotted (``"phases.weight_decay"``) fields changed."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *head, last = key.split(".")
            for part in head:
                node = node[part]
            node[last] = value
        return config_from_dict(d)


_SECTIONS = {
    "dataset": DatasetConfig,
    "arch": ArchConfig,
    "optimizer": OptimizerConfig,
    "schedule": ScheduleConfig,
    "phases": PhaseConfig,
}


def _build(cls, data, where):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data):
    data = dict(data)
    sections = {k: _build(cls, data.pop(k, {}) or {}, k) for k, cls in _SECTIONS.items()}
    cfg = _build(TrainingConfig, {**data, **sections}, "config")
    return cfg.validate()


def load_config(path, env=None):
    env = os.environ if env is None else env
    with open(path) as fh:
        cfg = config_from_dict(json.load(fh))
    if env.get("BINOPT_SEED"):
        cfg.seed = int(env["BINOPT_SEED"])
    return cfg


def save_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
