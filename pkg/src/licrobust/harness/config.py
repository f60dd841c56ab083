"""Suite configuration: JSON on disk, checked against the bundled schema."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import List, Optional, Tuple

import jsonschema

from ..attacks import DIRECTIONS

SCHEMA_NAME = "suite_config.schema.json"
WORKERS_ENV = "LICWB_WORKERS"


class ConfigError(ValueError):
    pass


def schema() -> dict:
    return json.loads(resources.files(__package__).joinpath(SCHEMA_NAME).read_text())


@dataclass
class TrainSettings:
    enabled: bool = True
    images: int = 64
    size: int = 96
    steps: int = 1500
    batch: int = 8
    crop: int = 64
    lr: float = 2e-3
    lr_final: float = 2e-4
    warmup: int = 100


@dataclass
class DefenseSettings:
    at: bool = False
    at_iters: int = 1000
    at_batch: int = 4
    at_attack_steps: int = 16
    online: bool = False
    online_iters: int = 64


@dataclass
class SuiteConfig:
    lambdas: List[float]
    images: List[str] = field(default_factory=list)
    synthetic_images: int = 0
    image_size: int = 64
    families: List[str] = field(default_factory=lambda: ["HYPER_S"])
    checkpoint_dir: Optional[str] = None
    train: TrainSettings = field(default_factory=TrainSettings)
    directions: List[Tuple[float, float]] = field(default_factory=lambda: [list(d) for d in DIRECTIONS])
    eps: float = 1e-3
    steps: int = 64
    tau: float = 1.0
    arda: bool = True
    eci: bool = False
    ldmr: bool = False
    local_maps: bool = False
    defense: DefenseSettings = field(default_factory=DefenseSettings)
    seed: int = 0
    workers: int = 1
    output_dir: str = "suite_out"

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "SuiteConfig":
        try:
            jsonschema.validate(d, schema())
        except jsonschema.ValidationError as e:
            raise ConfigError(f"invalid config at {'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}") from e
        d = dict(d)
        d["train"] = TrainSettings(**d.get("train", {}))
        d["defense"] = DefenseSettings(**d.get("defense", {}))
        if "directions" in d:
            d["directions"] = [list(map(float, p)) for p in d["directions"]]
        rel = lambda p: p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))
        d["images"] = [rel(p) for p in d.get("images", [])]
        if d.get("checkpoint_dir"):
            d["checkpoint_dir"] = rel(d["checkpoint_dir"])
        if "output_dir" in d:
            d["output_dir"] = rel(d["output_dir"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "SuiteConfig":
        with open(path) as f:
            try:
                d = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(d, os.path.dirname(os.path.abspath(path)))

    def validate(self):
        if not self.lambdas:
            raise ConfigError("lambda list is empty")
        if not self.images and self.synthetic_images == 0:
            raise ConfigError("no evaluation images: set images or synthetic_images")
        for p in self.images:
            if not os.path.isfile(p):
                raise ConfigError(f"image not found: {p}")
        if self.checkpoint_dir and not os.path.isdir(self.checkpoint_dir):
            raise ConfigError(f"checkpoint directory not found: {self.checkpoint_dir}")
        for gr, gd in self.directions:
            if gr == 0 and gd == 0:
                raise ConfigError("direction (0, 0) is not an attack")

    def effective_workers(self) -> int:
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                n = int(env)
            except ValueError as e:
                raise ConfigError(f"{WORKERS_ENV} must be an integer") from e
            if n < 1:
                raise ConfigError(f"{WORKERS_ENV} must be >= 1")
            return n
        return self.workers

    def to_dict(self) -> dict:
        return asdict(self)
