"""Model hyperparameter bundle and its text serialization."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np


@dataclass
class ModelConfig:
    views: int = 4
    joints: int = 20
    channels: int = 128
    layers: int = 2              # decoder layers per stage
    heads: int = 4
    window: int = 16             # temporal attention window
    image_height: int = 64
    image_width: int = 80
    patch_size: int = 16
    head_mode: str = "keypoint"  # "keypoint" | "parametric"
    ffn_mult: int = 4
    encoder_blocks: int = 2
    encoder_ffn_mult: int = 2
    use_temporal: bool = True
    use_projection_condition: bool = True
    use_auxiliary: bool = True   # query from headset pose vs learned embedding
    dtype: str = "f32"

    def __post_init__(self):
        if self.channels % self.heads != 0 or self.channels % 2 != 0:
            raise ValueError("channels must be divisible by the head count and by 2")
        if (self.channels // self.heads) % 2 != 0:
            raise ValueError("per-head dimension must be even for rotary encoding")
        if self.window < 1 or self.layers < 1:
            raise ValueError("window and layer count must be >= 1")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError("image resolution must be divisible by the patch size")
        if self.head_mode not in ("keypoint", "parametric"):
            raise ValueError(f"unknown head mode {self.head_mode!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    @property
    def patch_grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def token_count(self) -> int:
        hp, wp = self.patch_grid
        return hp * wp

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, val = [s.strip() for s in line.split("=", 1)]
            if key not in types:
                continue
            t = types[key]
            if t in ("int", int):
                kw[key] = int(val)
            elif t in ("bool", bool):
                kw[key] = val == "True"
            else:
                kw[key] = val
        return cls(**kw)


MICRO_CONFIG = dict(views=2, joints=4, channels=16, layers=1, heads=2, window=4,
                    image_height=16, image_width=16, patch_size=8)
