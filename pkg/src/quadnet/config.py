"""Run configuration shared by training, evaluation and the CLI."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .losses import LossConfig, Variant
from .nn.model import DESK, FULL, Architecture

ARCHITECTURES = {"full": FULL, "desk": DESK}


@dataclass
class RunConfig:
    data: str | None = None
    loss: str = "hingem5"
    dim: int = 100
    margin_push: float = 1.0
    margin_pull: float = 0.2
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 100
    max_iters: int = 20000
    window: int = 1000
    patience: int = 3
    seed: int = 0
    arch: str = "full"
    out: str | None = None

    def __post_init__(self):
        self.loss = Variant.parse(self.loss).value
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {sorted(ARCHITECTURES)}")
        for name in ("dim", "batch", "max_iters", "window", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        self.loss_config()

    @property
    def variant(self) -> Variant:
        return Variant.parse(self.loss)

    @property
    def architecture(self) -> Architecture:
        return ARCHITECTURES[self.arch]

    def loss_config(self) -> LossConfig:
        return LossConfig(self.margin_push, self.margin_pull, self.variant)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        raw = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)
