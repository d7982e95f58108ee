"""Run configuration: JSON file plus command-line overrides."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from .extractor import Architecture


@dataclass
class RunConfig:
    # model
    g: int = 3
    patch: int = 32
    channels: list = field(default_factory=lambda: [8, 16, 32])
    T: int = 10
    crf_enabled: bool = True
    compat: str = "equal"
    freeze_crf: bool = False
    # optimisation
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 20
    epochs: int = 20
    seeds: list = field(default_factory=lambda: [0])
    precision: str = "f32"
    # data
    n_slides: int = 30
    split_ratio: list = field(default_factory=lambda: [4, 1, 1])
    slide: dict = field(default_factory=dict)
    n_pos: int = 2000
    n_neg: int = 2000
    hard_frac: float = 0.5
    boundary_radius: float = 64
    n_valid_pos: int = 500
    n_valid_neg: int = 500
    augment: bool = True
    max_brightness: float = 64.0
    max_contrast: float = 0.75
    # inference and detection
    stride: int = 64
    nms_radius: Optional[float] = None
    prob_floor: float = 0.05
    workers: int = 1
    # gradient check
    gradcheck_patch: int = 16
    gradcheck_elements: int = 24
    gradcheck_epsilon: float = 1e-5

    def __post_init__(self):
        self.channels = list(self.channels)
        self.seeds = list(self.seeds)
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.T < 0 or self.batch_size < 1 or self.epochs < 0 or self.stride < 1:
            raise ValueError("T, epochs must be >= 0; batch_size, stride must be >= 1")

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1]

    @property
    def footprint(self) -> int:
        return self.g * self.patch

    @property
    def radius(self) -> float:
        return self.nms_radius if self.nms_radius is not None else 2.0 * self.stride

    def architecture(self, crf_enabled: Optional[bool] = None) -> Architecture:
        return Architecture(g=self.g, patch=self.patch, channels=tuple(self.channels),
                            crf_enabled=self.crf_enabled if crf_enabled is None else crf_enabled,
                            compat=self.compat)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names - {"config_hash"}
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in names})

    @classmethod
    def load(cls, path: Union[str, Path, None]) -> "RunConfig":
        if path is None:
            return cls()
        return cls.from_dict(json.loads(Path(path).read_text()))

    def echo(self, out_dir: Union[str, Path]) -> Path:
        """Write the configuration (and its hash) into ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.json"
        path.write_text(json.dumps({**self.to_dict(), "config_hash": self.digest()}, indent=2, sort_keys=True) + "\n")
        return path
