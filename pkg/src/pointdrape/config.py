"""Run configuration shared by the CLI commands."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .networks import NetConfig
from .training import TrainConfig

SEED_ENV_VAR = "POINTDRAPE_SEED"


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None


@dataclass
class RunConfig:
    """Everything a command needs beyond its direct flags."""

    dataset: str = ""
    mode: str = "full"
    output_dir: str = "out"
    seed: int = field(default_factory=default_seed)
    inference_resolution: int = 104
    coarse_checkpoint: str | None = None
    fine_checkpoint: str | None = None
    grid_path: str | None = None
    grid_resolution: int = 48
    grid_margin: float = 0.10
    smooth_iterations: int = 24
    smooth_tolerance: float = 1e-5
    train: TrainConfig = field(default_factory=TrainConfig)
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)
