"""Experiment configuration and seed fan-out."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

try:  # Python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml

# Sub-stream identifiers. Adding a consumer must only append here.
STREAMS = {
    "simulation": 0,
    "init": 1,
    "shuffle": 2,
    "coreset": 3,
    "validation": 4,
    "pretrain": 5,
}

SEQUENCE_ORDERS = (
    ("square", "obstacle", "hall"),
    ("obstacle", "square", "hall"),
    ("hall", "obstacle", "square"),
    ("obstacle", "hall", "square"),
)


def load_toml(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as fh:
        return _toml.load(fh)


def rng_for(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, stream, keys) built from a counter-style spawn key."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[stream], *(int(k) for k in keys)))
    return np.random.default_rng(ss)


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


@dataclass
class ExperimentConfig:
    # full-scale defaults
    time_step: float = 0.2
    task_length: float = 200.0
    t_buff: float = 6.0
    t_pred: float = 3.0
    t_tbptt: float = 3.0
    t_obs: float = 0.0
    epochs: int = 250
    lr: float = 2e-3
    l2: float = 5e-4
    ewc_lambda: float = 1e6
    coreset_size: int = 100
    coreset_update: int = 20
    val_size: int = 100
    # pre-training on the synthetic open environment
    pretrain_epochs: int = 60
    pretrain_length: float = 400.0
    pretrain_pedestrians: int = 6
    # artifact choices
    batch_size: int = 16
    grid: int = 32
    patch_resolution: float = 0.1
    n_social: int = 5
    vel_width: int = 16
    occ_width: int = 32
    soc_width: int = 32
    hidden: int = 64
    n_pedestrians: int = 6
    sequence: list[str] = field(default_factory=lambda: ["square", "obstacle", "hall"])
    sequences: list[list[str]] = field(default_factory=lambda: [list(o) for o in SEQUENCE_ORDERS])
    strategies: list[str] = field(default_factory=lambda: ["vanilla", "ewc", "coreset", "scl", "cv", "offline"])
    dense_pedestrians: list[int] = field(default_factory=lambda: [10, 20])
    dense_strategies: list[str] = field(default_factory=lambda: ["scl"])
    significance_sequence: list[str] = field(default_factory=lambda: ["obstacle", "hall", "square"])
    seeds: list[int] = field(default_factory=lambda: [7])
    out_dir: str = "results"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        dt = self.time_step
        if dt <= 0:
            raise ValueError("time_step must be positive")
        for name in ("task_length", "t_buff", "t_pred", "t_tbptt", "pretrain_length"):
            val = getattr(self, name)
            if val <= 0 or abs(val / dt - round(val / dt)) > 1e-9:
                raise ValueError(f"{name}={val} is not a positive multiple of time_step={dt}")
        if abs(self.t_buff - (self.t_pred + self.t_tbptt)) > 1e-9:
            raise ValueError(f"t_buff={self.t_buff} must equal t_pred + t_tbptt = {self.t_pred + self.t_tbptt}")
        if self.t_obs != 0:
            raise ValueError("only t_obs = 0 is supported; history enters through the recurrent state")
        if self.coreset_update < 0 or self.coreset_size < 0:
            raise ValueError("coreset sizes must be non-negative")
        if self.n_pedestrians < 1 or self.pretrain_pedestrians < 1 or any(n < 1 for n in self.dense_pedestrians):
            raise ValueError("pedestrian counts must be positive")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be non-negative")

    @property
    def pred_steps(self) -> int:
        return int(round(self.t_pred / self.time_step))

    @property
    def tbptt_steps(self) -> int:
        return int(round(self.t_tbptt / self.time_step))

    @property
    def buff_steps(self) -> int:
        return int(round(self.t_buff / self.time_step))

    @property
    def task_ticks(self) -> int:
        return int(round(self.task_length / self.time_step))

    @classmethod
    def reduced(cls, **overrides) -> ExperimentConfig:
        """CI scale: 60 s tasks and 50 epochs per adaptation phase."""
        base = dict(task_length=60.0, epochs=50)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> ExperimentConfig:
        raw = load_toml(path)
        raw = raw.get("experiment", raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)
