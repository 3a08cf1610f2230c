"""Experiment configuration: model recipe plus optimizer schedule."""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


class Objective(str, enum.Enum):
    VCAE = "VCAE"
    CWAE = "CWAE"
    VAE = "VAE"
    VAE_IAF = "VAE_IAF"

    @property
    def heads(self) -> int:
        """Number of z_dim-sized vectors the encoder emits."""
        return {"VCAE": 1, "CWAE": 1, "VAE": 2, "VAE_IAF": 3}[self.value]


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    milestones: list[int] = field(default_factory=list)
    # multiplicative factor applied at each milestone
    gammas: list[float] = field(default_factory=list)
    batch_size: int = 100
    epochs: int = 10
    # optional hard budget of minibatch steps; training stops once reached
    steps: int | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be nonnegative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"schedule milestones must be strictly increasing: {self.milestones}")
        if len(self.gammas) not in (0, len(self.milestones)):
            raise ConfigError("gammas must match milestones")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        gammas = self.gammas or [0.5] * len(self.milestones)
        for m, g in zip(self.milestones, gammas):
            if epoch >= m:
                lr *= g
        return lr


@dataclass
class ModelConfig:
    z_dim: int = 2
    noise_variance: float = 0.0
    variance_target: float = 2.0
    penalty_weight: float = 0.0
    objective: Objective = Objective.VCAE
    architecture: str = "mlp"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    # total-correlation weight (gamma); 0 disables the discriminator
    tc_weight: float = 0.0
    # posterior IAF steps, only read when objective is VAE_IAF
    iaf_steps: int = 2
    # size of the training subset (None = whole split); desk presets use it
    train_subset: int | None = None
    arch_options: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.objective, str):
            self.objective = Objective(self.objective.upper())
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.z_dim < 1:
            raise ConfigError("z_dim must be >= 1")
        if self.noise_variance < 0:
            raise ConfigError("noise_variance must be >= 0")
        if self.variance_target <= 0:
            raise ConfigError("variance_target must be > 0")
        if self.penalty_weight < 0:
            raise ConfigError("penalty_weight must be >= 0")
        if self.tc_weight < 0:
            raise ConfigError("tc_weight must be >= 0")

    @property
    def kernel_scale(self) -> float:
        """IMQ kernel constant C = 2 * z_dim * prior variance (prior is unit variance)."""
        return 2.0 * self.z_dim * 1.0

    def replace(self, **changes) -> "ModelConfig":
        if "optimizer" in changes and isinstance(changes["optimizer"], dict):
            opt = dataclasses.asdict(self.optimizer)
            opt.update(changes["optimizer"])
            changes["optimizer"] = OptimizerConfig(**opt)
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["objective"] = self.objective.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


def merge(base: dict, overrides: dict) -> dict:
    """Recursive dict merge; ``overrides`` wins."""
    out = dict(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load_json(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)
