"""Dataclass configs and TOML loading.

A config file has flat sections named after the dataclasses below::

    [model]
    k_keep = 32
    [train]
    epochs = 15
    [tpd]
    tau_proto = 0.1
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from gtta.errors import ConfigParseError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    channels: int = 3
    feat_dim: int = 64  # F_b
    num_classes: int = 2
    node_dim: int = 64  # F
    out_dim: int = 64  # F'
    k_keep: int | None = None  # None -> ceil(N / 2)
    init_seed_offset: int = 0
    standardize: bool = True  # per-image, per-channel zero mean / unit variance

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_regions(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch**2

    @property
    def keep(self) -> int:
        return self.k_keep if self.k_keep is not None else math.ceil(self.num_regions / 2)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch: int = 16
    lr: float = 1e-4
    decay_every: int = 5
    decay_factor: float = 0.1
    lam: float = 0.5
    grt_enabled: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch < 1 or self.decay_every < 1:
            raise ValueError("batch and decay_every must be >= 1")
        if self.lr <= 0 or self.decay_factor <= 0:
            raise ValueError("lr and decay_factor must be > 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        return self.lr * self.decay_factor ** (epoch // self.decay_every)


@dataclass(frozen=True)
class TpdConfig:
    n_neighbors: int = 8
    tau_proto: float = 0.1
    tau_epd: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    plm_lr: float = 1e-3
    clf_lr: float = 1e-4
    steps_per_batch: int = 1
    batch: int = 32
    label_smooth_eps: float = 1e-4
    n_plm: int = 4
    plm_init_noise: float = 0.01
    capacity: int = 256
    update_before_predict: bool = True

    def __post_init__(self):
        if self.n_neighbors < 1:
            raise ValueError("n_neighbors must be >= 1")
        if self.tau_proto <= 0 or self.tau_epd <= 0:
            raise ValueError("temperatures must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1/lambda2 must be >= 0")
        if min(self.batch, self.capacity, self.n_plm) < 1 or self.steps_per_batch < 0:
            raise ValueError("batch, capacity and n_plm must be >= 1, steps_per_batch >= 0")
        if self.plm_lr < 0 or self.clf_lr < 0:
            raise ValueError("learning rates must be >= 0")


@dataclass(frozen=True)
class BaselineConfig:
    tent_lr: float = 1e-4
    plclf_lr: float = 1e-4
    plclf_threshold: float = 0.9
    t3a_filter: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0  # benchmark seed and first model seed
    seeds: int = 5
    methods: tuple = ("none", "tent", "plclf", "t3a", "tpd")
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tpd: TpdConfig = field(default_factory=TpdConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "tpd": TpdConfig, "baselines": BaselineConfig}


def _apply(obj, values: dict, where: str):
    names = {f.name for f in fields(obj)}
    unknown = set(values) - names
    if unknown:
        raise ConfigParseError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    try:
        return replace(obj, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigParseError(f"[{where}]: {exc}") from None


def config_from_dict(doc: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    top = {k: v for k, v in doc.items() if k not in _SECTIONS}
    if "methods" in top:
        top["methods"] = tuple(top["methods"])
    updates = {}
    for name in _SECTIONS:
        if name in doc:
            if not isinstance(doc[name], dict):
                raise ConfigParseError(f"[{name}] must be a table")
            updates[name] = _apply(getattr(cfg, name), doc[name], name)
    cfg = _apply(cfg, top, "top level")
    return replace(cfg, **updates)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigParseError(f"{path}: {exc}") from None
    return config_from_dict(doc)
