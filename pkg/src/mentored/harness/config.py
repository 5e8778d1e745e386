"""Experiment configuration: a flat JSON object, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..errors import ConfigError

MNIST_DIR = "data/mnist"


def default_probes():
    return [
        {"mentor_layer": 2, "mentee_layer": 2, "group": "body"},
        {"mentor_layer": -1, "mentee_layer": -1, "group": "softmax"},
    ]


@dataclass
class ExperimentConfig:
    # networks
    mentor_arch: Any = "mlp-mentor"
    mentor_checkpoint: str | None = None
    mentee_arch: Any = "mlp-mentee"
    init_checkpoint: str | None = None
    dropout: float = 0.5
    batchnorm: bool = True
    init_std: float = 0.01
    probes: list = field(default_factory=default_probes)
    temperature: float = 3.0

    # schedule
    personality: str = "obedient"
    rho: float = 0.5
    alpha0: float | None = None
    beta0: float | None = None
    gamma0: float | None = None
    gamma_scale: float = 1.0
    ramp: str = "quadratic"

    # optimizer and learning rate
    optimizer: str = "rmsprop_nesterov"
    lr: float = 1e-3
    momentum: float = 0.9
    rms_decay: float = 0.9
    epsilon: float = 1e-8
    lr_drop_epoch: int = 75
    lr_drop_factor: float = 100.0
    recovery_factor: float = 10.0
    max_recoveries: int = 6
    grad_norm_limit: float = 1e4
    l1: float = 1e-4
    l2: float = 1e-4

    # data
    train_images: str = f"{MNIST_DIR}/train-images-idx3-ubyte.gz"
    train_labels: str | None = f"{MNIST_DIR}/train-labels-idx1-ubyte.gz"
    test_images: str | None = f"{MNIST_DIR}/t10k-images-idx3-ubyte.gz"
    test_labels: str | None = f"{MNIST_DIR}/t10k-labels-idx1-ubyte.gz"
    mean_mode: str = "per_pixel"
    redact_p: int | None = None
    redact_seed: int | None = None
    subset_size: int | None = None
    batch_size: int = 500

    # run
    epochs: int = 150
    early_stop_patience: int = 10
    seed: int = 0
    deterministic: bool = False
    out_dir: str = "runs/default"
    inject_nan: list = field(default_factory=list)

    # redaction grid
    grid_p: list = field(default_factory=lambda: [500, 250, 100, 50, 10, 1])
    grid_seeds: list = field(default_factory=lambda: [0, 1, 2])
    grid_personalities: list = field(default_factory=lambda: ["obedient", "independent"])

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("dropout", "l1", "l2", "init_std", "gamma_scale", "rho", "lr", "temperature"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.temperature <= 0 or self.lr <= 0:
            raise ConfigError("temperature and lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.redact_p is not None and self.redact_p < 1:
            raise ConfigError("redact_p must be >= 1")
        if not isinstance(self.probes, list):
            raise ConfigError("probes must be a list of {mentor_layer, mentee_layer, group} objects")
        for entry in self.probes:
            if not isinstance(entry, dict) or not {"mentor_layer", "mentee_layer"} <= set(entry) \
                    or not set(entry) <= {"mentor_layer", "mentee_layer", "group", "weight"}:
                raise ConfigError(f"bad probe entry {entry!r}")

    # io ----------------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)
