"""Experiment configuration: one JSON file with strict keys and full defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigurationError
from .model import ModelConfig
from .pcl import ContrastiveConfig
from .synthgen import DEFAULT_MIXTURE, MixtureConfig
from .trainer import PROTOTYPE_SOURCES, EwtaSchedule


@dataclass(frozen=True)
class DataConfig:
    probabilities: dict = field(default_factory=lambda: dict(DEFAULT_MIXTURE))
    noise_std: float = 0.1
    speed_range: tuple = (4.0, 14.0)
    neighbor_range: tuple = (0, 4)
    dt: float = 0.5
    half_width: float = 2.0
    n_distractors: int = 2
    count: int = 6000
    split: dict = field(default_factory=lambda: {"train": 4000 / 6000, "val": 1000 / 6000, "test": 1000 / 6000})


@dataclass(frozen=True)
class ModelSection:
    embed_dim: int = 64
    num_hypotheses: int = 20
    obs_len: int = 8
    pred_len: int = 6
    hist_width: int = 64
    nb_width: int = 32
    map_width: int = 32
    dec_width: int = 128


@dataclass(frozen=True)
class ScheduleSection:
    stages: tuple = (20, 10, 5, 2, 1)
    epochs_per_stage: int = 5
    batch_size: int = 256


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    record_stride: int = 1
    prototype_source: str = "live_per_epoch"


@dataclass(frozen=True)
class ThresholdSection:
    mode: str = "fixed"  # fixed | percentile
    theta_e: float = 0.70
    theta_var: float = 0.20
    easy_target: float = 0.62


@dataclass(frozen=True)
class LossSection:
    lam: float = 0.01
    tau: float = 0.1
    alpha: float = 10.0
    phi_floor: float = 1e-3
    density_scale: float = 1.0
    exclude_self_in_denominator: bool = False
    reduction: str = "mean"  # mean | sum (batch reduction of the contrastive terms)


@dataclass(frozen=True)
class EvalSection:
    offroad_mode: str = "all"  # all | best
    percentiles: tuple = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class BiasSection:
    fraction: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    phase1: ScheduleSection = field(default_factory=ScheduleSection)
    phase2: ScheduleSection = field(default_factory=lambda: ScheduleSection(epochs_per_stage=10))
    train: TrainSection = field(default_factory=TrainSection)
    thresholds: ThresholdSection = field(default_factory=ThresholdSection)
    loss: LossSection = field(default_factory=LossSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bias: BiasSection = field(default_factory=BiasSection)
    seed: int = 0
    out_dir: str = "runs/default"

    # -- derived objects --------------------------------------------------

    def mixture(self) -> MixtureConfig:
        d = self.data
        return MixtureConfig(
            probabilities=dict(d.probabilities),
            noise_std=d.noise_std,
            speed_range=tuple(d.speed_range),
            neighbor_range=tuple(d.neighbor_range),
            seed=sub_seed(self.seed, "datagen"),
            obs_len=self.model.obs_len,
            pred_len=self.model.pred_len,
            dt=d.dt,
            half_width=d.half_width,
            n_distractors=d.n_distractors,
        )

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            obs_len=m.obs_len,
            pred_len=m.pred_len,
            max_neighbors=int(self.data.neighbor_range[1]),
            embed_dim=m.embed_dim,
            num_hypotheses=m.num_hypotheses,
            hist_width=m.hist_width,
            nb_width=m.nb_width,
            map_width=m.map_width,
            dec_width=m.dec_width,
        )

    def schedule(self, phase: int) -> EwtaSchedule:
        s = self.phase1 if phase == 1 else self.phase2
        return EwtaSchedule(tuple(s.stages), s.epochs_per_stage, s.batch_size)

    def contrastive(self) -> ContrastiveConfig:
        l = self.loss
        return ContrastiveConfig(l.lam, l.tau, l.alpha, l.phi_floor, l.density_scale, l.exclude_self_in_denominator, l.reduction)

    def validate(self) -> None:
        self.mixture().validate()
        self.model_config().validate()
        for phase in (1, 2):
            self.schedule(phase).validate(self.model.num_hypotheses)
        split = self.data.split
        if set(split) != {"train", "val", "test"}:
            raise ConfigurationError(f"data.split needs exactly train/val/test, got {sorted(split)}")
        if any(v < 0 for v in split.values()) or sum(split.values()) > 1.0 + 1e-9:
            raise ConfigurationError(f"data.split fractions must be non-negative and sum to <= 1, got {split}")
        if self.data.count < 1:
            raise ConfigurationError("data.count must be >= 1")
        if self.train.prototype_source not in PROTOTYPE_SOURCES:
            raise ConfigurationError(f"train.prototype_source must be one of {PROTOTYPE_SOURCES}")
        if self.train.lr <= 0 or self.train.record_stride < 1:
            raise ConfigurationError("train.lr must be > 0 and train.record_stride >= 1")
        if self.thresholds.mode not in ("fixed", "percentile"):
            raise ConfigurationError("thresholds.mode must be 'fixed' or 'percentile'")
        if not 0 < self.thresholds.easy_target < 1:
            raise ConfigurationError("thresholds.easy_target must lie in (0, 1)")
        if self.thresholds.theta_e <= 0 or self.thresholds.theta_var < 0:
            raise ConfigurationError("need thresholds.theta_e > 0 and thresholds.theta_var >= 0")
        l = self.loss
        if l.lam < 0 or l.tau <= 0 or l.alpha <= 0 or l.phi_floor <= 0 or l.density_scale <= 0:
            raise ConfigurationError("need loss.lam >= 0 and positive tau, alpha, phi_floor, density_scale")
        if l.reduction not in ("mean", "sum"):
            raise ConfigurationError("loss.reduction must be 'mean' or 'sum'")
        if self.eval.offroad_mode not in ("all", "best"):
            raise ConfigurationError("eval.offroad_mode must be 'all' or 'best'")
        if not 0.0 <= self.bias.fraction <= 1.0:
            raise ConfigurationError(f"bias.fraction must lie in [0, 1], got {self.bias.fraction}")

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def digest(self) -> str:
        """Hash of every setting that affects numeric outputs (everything but out_dir)."""
        doc = self.to_dict()
        doc.pop("out_dir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        return {"config_hash": self.digest(), "seed": self.seed}

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _jsonable(x: Any):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _build(cls, doc: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return doc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config keys in {where or 'top level'}: {unknown}")
    kwargs = {}
    defaults = cls()
    for name, value in doc.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}".lstrip("."))
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        elif isinstance(current, dict):
            kwargs[name] = dict(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(doc: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, doc, "")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(doc)


def sub_seed(root: int, name: str) -> int:
    """Independent named stream derived from the root seed."""
    return int(np.random.SeedSequence([int(root), zlib.crc32(name.encode())]).generate_state(1)[0])
