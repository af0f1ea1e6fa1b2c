"""Run configuration: one JSON document with a section per module.

Missing sections and keys take their defaults; unknown keys are errors.
``desk_preset()`` is the small setup the learnability checks use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from . import __version__, jsonio
from .configtools import from_dict, to_dict
from .encoder import EncoderSpec
from .errors import ConfigError
from .geometry import VoxelGridSpec
from .model import BackboneConfig, ModelConfig
from .scenegen import SceneConfig
from .train import TrainConfig


@dataclass
class EvalConfig:
    threshold: float = 0.5
    bench_repeats: int = 20
    bench_warmup: int = 3
    object_counts: tuple[int, ...] = (3, 4, 5, 6)
    scenes_per_count: int = 20
    object_sweep_seed: int = 1000
    som_seed: int = 0
    som_concurrency: int = 1

    def validate(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.bench_repeats < 1 or self.bench_warmup < 0:
            raise ConfigError("bench_repeats must be >= 1 and bench_warmup >= 0")
        if self.scenes_per_count < 1 or self.som_concurrency < 1:
            raise ConfigError("scenes_per_count and som_concurrency must be >= 1")


@dataclass
class RunConfig:
    dataset: SceneConfig = field(default_factory=SceneConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    grid: VoxelGridSpec = field(default_factory=VoxelGridSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        for section in (self.dataset, self.encoder, self.grid, self.model, self.train, self.eval):
            section.validate()
        if self.train.residual_enabled and not self.model.head.residual_enabled and self.model.head.kind == "dense":
            raise ConfigError("train.residual_enabled needs model.head.residual_enabled")

    def to_dict(self):
        return to_dict(self)

    def echo(self):
        return {"config": self.to_dict(), "tool_version": __version__}


def load_config(path=None):
    """Read a config file; ``None`` gives all defaults."""
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        data = jsonio.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except ValueError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def config_from_dict(data):
    cfg = from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def desk_preset():
    """Laptop-scale setup: material and bump anomalies, stride-2 encoder, 1x1 backbone convs, 20 epochs."""
    cfg = RunConfig(
        dataset=SceneConfig(anomaly_types=("material", "bump")),
        encoder=EncoderSpec(patch_stride=2, out_dim=64),
        model=ModelConfig(backbone=BackboneConfig(kernel=1)),
        train=TrainConfig(epochs=20, checkpoint_every=5),
    )
    cfg.validate()
    return cfg


def write_config(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    jsonio.dump(cfg.to_dict(), path)
