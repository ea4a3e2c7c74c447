from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .pipeline import POSITION_MODES


@dataclass
class Config:
    d: int = 64
    heads: int = 4
    layers: int = 2
    d_ff: int = 128
    d_app: int = 16
    max_seq: int = 128
    k: int = 2
    seed: int = 0
    stoplist: str | None = None  # path; None means the built-in list
    mask_off: bool = False
    position_mode: str = "relative"
    lr: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float | None = None  # global gradient-norm cap; None disables
    batch_size: int = 8
    epochs: int = 20
    init_scale: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("d", "heads", "layers", "d_ff", "d_app", "max_seq", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d % 8:
            raise ValueError(f"d={self.d} must be divisible by 8 for the geometry embedding")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.k < 0:
            raise ValueError(f"k must be non-negative, got {self.k}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.position_mode not in POSITION_MODES:
            raise ValueError(f"position_mode must be one of {POSITION_MODES}")

    @property
    def p_max(self) -> int:
        # every position is bounded by the token's index in the sequence
        return self.max_seq + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes) -> "Config":
        data = self.to_dict()
        data.update({k: v for k, v in changes.items() if v is not None})
        return Config.from_dict(data)
