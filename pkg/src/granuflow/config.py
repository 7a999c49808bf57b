"""JSON run configuration with strict key checking."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .dem import MaterialParams, SceneConfig
from .graph import FeatureConfig
from .learner.train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    latent: int = 64
    n_blocks: int = 5
    hidden_layers: int = 2

    def __post_init__(self):
        if self.latent < 1 or self.n_blocks < 0 or self.hidden_layers < 0:
            raise ConfigError("model sizes must be non-negative (latent >= 1)")


@dataclass
class DatasetConfig:
    stride: int = 1
    sample_every: int = 1


@dataclass
class AnalysisConfig:
    grid: tuple = (6, 1, 6)
    t0: int = 30
    split_axis: int = 0
    split_threshold: Optional[float] = None  # None: median coordinate at t0
    profile_bins: int = 10

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise ConfigError("analysis.grid needs three positive counts")
        if self.split_axis not in (0, 1, 2):
            raise ConfigError("analysis.split_axis must be 0, 1 or 2")


_SECTIONS = {
    "scene": SceneConfig,
    "material": MaterialParams,
    "features": FeatureConfig,
    "model": ModelConfig,
    "training": TrainConfig,
    "dataset": DatasetConfig,
    "analysis": AnalysisConfig,
}


def _build(cls, data: Any, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from None


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    material: MaterialParams = field(default_factory=MaterialParams)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seed: int = 0
    out_dir: str = "."

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = sorted(set(data) - set(_SECTIONS) - {"seed", "out_dir"})
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        kwargs = {name: _build(cls_, data[name], name) for name, cls_ in _SECTIONS.items() if name in data}
        if "seed" in data:
            if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = data["seed"]
        if "out_dir" in data:
            kwargs["out_dir"] = str(data["out_dir"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(data)

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        """Apply a command-line seed override to every seeded section."""
        if seed is None:
            seed = self.seed
        self.seed = seed
        self.scene.seed = seed
        self.training.seed = seed
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)
