from __future__ import annotations

import dataclasses
from dataclasses import dataclass

PRUNE_MODES = ("stts", "heuristic", "random", "none")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    """Hyperparameters for the toy encoder, scorer, pruner and training loop."""

    frame_size: int = 24
    patch_size: int = 4
    channels: int = 1
    frames: int = 8
    dim: int = 32
    heads: int = 4
    layers: int = 6
    layer: int = 3  # scorer reads the output of this layer; bias goes into layer + 1
    pool_width: int = 3
    mlp_ratio: int = 4
    num_classes: int = 4
    prune_ratio: float = 50.0
    mode: str = "stts"
    protect_first: bool = True
    seed: int = 0
    precision: str = "float64"
    lr: float = 3e-3
    scorer_lr: float = 3e-3
    steps: int = 300
    batch_size: int = 16
    task_loss: bool = True
    aux_loss: bool = True
    train_encoder: bool = True
    aux_warmup: int = 500  # leading steps that train only the scorer on L_sim
    freeze_stem: bool = True  # embedding, positions and layers 0..l stay at init
    init_scale: float = 0.02
    head_mixer: bool = False  # global attention over each video's survivors before pooling

    def __post_init__(self):
        self.validate()

    @property
    def grid(self) -> int:
        return self.frame_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def pooled_grid(self) -> int:
        return self.grid // self.pool_width

    @property
    def num_pooled(self) -> int:
        return self.pooled_grid * self.pooled_grid

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def validate(self) -> None:
        if self.frame_size % self.patch_size:
            raise ConfigError(f"frame size {self.frame_size} is not divisible by patch size {self.patch_size}")
        if self.grid % self.pool_width:
            raise ConfigError(f"patch grid {self.grid} is not divisible by pool width {self.pool_width}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.dim % 2:
            raise ConfigError("dim must be even (scorer tapers to dim/2)")
        if not 0 <= self.layer or not self.layer + 1 < self.layers:
            raise ConfigError(f"injection layer {self.layer} needs layer + 1 < layers ({self.layers})")
        if not 0 <= self.prune_ratio <= 100:
            raise ConfigError(f"prune ratio {self.prune_ratio} outside [0, 100]")
        if self.mode not in PRUNE_MODES:
            raise ConfigError(f"unknown prune mode {self.mode!r}; expected one of {PRUNE_MODES}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.frames < 1:
            raise ConfigError("need at least one frame")
        if self.steps < 0 or self.aux_warmup < 0:
            raise ConfigError("steps and aux_warmup must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if self.lr <= 0 or self.scorer_lr <= 0:
            raise ConfigError("learning rates must be positive")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)
