"""Experiment configuration: dataclasses loaded from YAML."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..errors import ConfigError
from ..gating import ZebraConfig
from ..pruning import PruneSpec

MODELS = ("toy_cnn", "vgg_small", "resnet_small")
DATASETS = ("cifar10", "synthetic")

# per-channel statistics of the CIFAR-10 training set
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class OptimizerConfig:
    initial_lr: float = 0.1
    decay_milestones: list[int] | None = None  # None: 50% and 75% of the epochs
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be > 0")
        if not 0 < self.decay_factor < 1:
            raise ConfigError("decay_factor must be in (0, 1) so the schedule strictly decreases")
        m = self.decay_milestones
        if m is not None and any(b <= a for a, b in zip(m, m[1:])):
            raise ConfigError(f"decay_milestones must be strictly increasing, got {m}")

    def milestones(self, epochs: int) -> list[int]:
        if self.decay_milestones is not None:
            return list(self.decay_milestones)
        return sorted({max(1, epochs // 2), max(1, (3 * epochs) // 4)})


@dataclass
class DataConfig:
    path: str | None = None  # CIFAR-10 binary directory
    train_subset: int | None = 5000
    test_subset: int | None = 1000
    subset_seed: int = 7
    image_size: int = 16  # synthetic only; CIFAR-10 is always 32
    num_classes: int = 10
    synthetic_train: int = 5000
    synthetic_test: int = 1000
    mean: list[float] = field(default_factory=lambda: list(CIFAR10_MEAN))
    std: list[float] = field(default_factory=lambda: list(CIFAR10_STD))


@dataclass
class ExperimentConfig:
    model: str = "toy_cnn"
    dataset: str = "synthetic"
    zebra: ZebraConfig | None = field(default_factory=ZebraConfig)
    prune: PruneSpec | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    num_threads: int = 1
    bits: int = 32
    name: str = ""

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {MODELS}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; choose from {DATASETS}")
        if self.epochs < 0 or self.batch_size < 1 or self.num_threads < 1:
            raise ConfigError("epochs must be >= 0, batch_size and num_threads >= 1")

    @property
    def input_size(self) -> int:
        return 32 if self.dataset == "cifar10" else self.data.image_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        _reject_unknown(cls, d, "experiment")
        try:
            if "zebra" in d and d["zebra"] is not None:
                _reject_unknown(ZebraConfig, d["zebra"], "zebra")
                d["zebra"] = ZebraConfig(**d["zebra"])
            if d.get("prune") is not None:
                _reject_unknown(PruneSpec, d["prune"], "prune")
                d["prune"] = PruneSpec(**d["prune"])
            if "optimizer" in d:
                _reject_unknown(OptimizerConfig, d["optimizer"], "optimizer")
                d["optimizer"] = OptimizerConfig(**d["optimizer"])
            if "data" in d:
                _reject_unknown(DataConfig, d["data"], "data")
                d["data"] = DataConfig(**d["data"])
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def _reject_unknown(cls, d, section: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")


def load_yaml(path) -> dict:
    try:
        with open(path) as f:
            d = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return d


def load_config(path) -> ExperimentConfig:
    d = load_yaml(path)
    cfg = ExperimentConfig.from_dict(d)
    if cfg.data.path and not Path(cfg.data.path).is_absolute():
        cfg.data.path = str((Path(path).parent / cfg.data.path).resolve())
    return cfg
