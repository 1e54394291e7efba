"""Run configuration: every tunable with its default, loadable from JSON."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import InvalidInputError


@dataclass
class Config:
    # loss weights
    lambda_recon: float = 0.8
    lambda_temp: float = 0.1
    lambda_spatial: float = 0.2
    temporal_reduction: str = "mean"
    # schedule
    warm_up_end: int = 3000
    reg_end: int = 6000
    warmup_geometry: bool = False
    iterations: int = 20000
    # spatial-awareness regularizer
    knn_k: int = 5
    kl_samples: int = 1000
    kl_cap: int = 20000
    knn_every: int = 500
    # networks
    hidden_width: int = 64
    zs_dim: int = 32
    zt_dim: int = 32
    deform_layers: int = 6
    pos_freqs: int = 6
    time_freqs: int = 4
    sep_batch_norm: bool = True
    sep_dropout: float = 0.1
    pdyn_gating: bool = True
    # let the deformation loss reach the mask logits through the separation field input
    sep_mask_gradient: bool = False
    deform_color: bool = False
    deform_opacity: bool = False
    # optimizer (per parameter group)
    lr_position: float = 1.6e-4
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_color: float = 1e-2
    lr_opacity: float = 5e-2
    lr_mask: float = 5e-2
    lr_network: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    # rasterizer
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    # run control
    use_stdr: bool = True
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.temporal_reduction not in ("sum", "mean"):
            raise InvalidInputError("temporal_reduction must be 'sum' or 'mean'")
        if not 0 <= self.warm_up_end <= self.reg_end:
            raise InvalidInputError("schedule needs 0 <= warm_up_end <= reg_end")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be >= 0")
        if self.knn_k < 1 or self.kl_samples < 1 or self.kl_cap < 1 or self.knn_every < 1:
            raise InvalidInputError("knn_k, kl_samples, kl_cap and knn_every must be >= 1")
        if not 0.0 <= self.sep_dropout < 1.0:
            raise InvalidInputError("sep_dropout must be in [0, 1)")
        if self.deform_layers < 2:
            raise InvalidInputError("deform_layers must be >= 2")
        if len(self.background) != 3:
            raise InvalidInputError("background must have three components")

    @classmethod
    def field_names(cls):
        return [f.name for f in dataclasses.fields(cls)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        unknown = sorted(set(d) - set(cls.field_names()))
        if unknown:
            raise InvalidInputError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "Config":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **overrides) -> "Config":
        d = self.to_dict()
        d.update(overrides)
        return Config.from_dict(d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
