"""Training configuration: one flat dataclass, JSON round-trip, dotted overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import InvalidInput
from .losses import LossWeights
from .prior import DEFAULT_NEGATIVE_PROMPT, DEFAULT_POSITIVE_PROMPT, DiffusionSchedule


def _optimize_weights() -> LossWeights:
    return LossWeights(rgb=1e4, mask=2e4, ssim=1e3, lpips=1e3, pose=2e5, can=2e5)


def _refine_weights() -> LossWeights:
    return LossWeights(rgb=1.0, mask=0.1, ssim=0.0, lpips=0.2, gen=0.1)


@dataclass
class TrainingConfig:
    seed: int = 0

    # stage lengths and SDS mixing
    optimize_steps: int = 1200
    refine_steps: int = 1800
    rho_posed: float = 0.75          # probability of a posed-space SDS step
    canonical_angles: int = 18       # yaw set {k * 2pi/canonical_angles}; 18 -> multiples of pi/9
    optimize_weights: LossWeights = field(default_factory=_optimize_weights)
    refine_weights: LossWeights = field(default_factory=_refine_weights)

    # optimizer (adaptive moments per parameter group)
    lr_position: float = 1.6e-4      # multiplied by scene extent, decays exponentially
    lr_position_final: float = 0.01  # final/initial lr ratio over a stage
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15

    # adaptive density control (active only inside the refine window)
    densify_interval: int = 100
    densify_grad_threshold: float = 2.5e-3
    densify_scale_fraction: float = 0.01
    split_factor: float = 1.6
    prune_opacity: float = 0.005
    kl_merge_threshold: float = 0.1
    refine_densify_until: int = 1000
    freeze_density: bool = False     # disables all density control everywhere

    # diffusion prior
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)
    positive_prompt: str = DEFAULT_POSITIVE_PROMPT
    negative_prompt: str = DEFAULT_NEGATIVE_PROMPT
    inpaint_steps: int = 10
    init_conditioning_scale: float = 1.0
    refine_conditioning_scale: float = 0.3

    # body / initialization
    sigma_z: float | None = None     # z-buffer threshold; None -> 1.5 x mean bone length
    template_spacing: float = 0.048
    init_opacity: float = 0.1
    init_scale_factor: float = 0.75  # x per-point mean 4-NN distance

    # canonical-view camera for SDS regularization renders
    canonical_distance: float = 3.0
    canonical_focal_factor: float = 1.4   # focal = factor * image size
    canonical_height: float = 0.9

    def __post_init__(self):
        if self.optimize_steps <= 0 or self.refine_steps <= 0:
            raise InvalidInput("step counts must be positive")
        if not (0.0 <= self.rho_posed <= 1.0):
            raise InvalidInput("rho_posed must lie in [0, 1]")
        for name in ("densify_grad_threshold", "prune_opacity", "kl_merge_threshold"):
            if getattr(self, name) <= 0:
                raise InvalidInput(f"{name} must be positive")
        if isinstance(self.optimize_weights, dict):
            self.optimize_weights = LossWeights.from_json(self.optimize_weights)
        if isinstance(self.refine_weights, dict):
            self.refine_weights = LossWeights.from_json(self.refine_weights)
        if isinstance(self.schedule, dict):
            self.schedule = DiffusionSchedule.from_json(self.schedule)

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["optimize_weights"] = self.optimize_weights.to_json()
        obj["refine_weights"] = self.refine_weights.to_json()
        obj["schedule"] = self.schedule.to_json()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "TrainingConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    def apply_overrides(self, overrides: list[str]) -> "TrainingConfig":
        """Apply ``dotted.key=value`` strings on top of this config."""
        obj = self.to_json()
        for item in overrides:
            if "=" not in item:
                raise InvalidInput(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            node = obj
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise InvalidInput(f"override {key!r}: no such config group {p!r}")
                node = node[p]
            leaf = parts[-1]
            if leaf not in node:
                raise InvalidInput(f"override {key!r}: no such config key")
            try:
                node[leaf] = json.loads(raw)
            except json.JSONDecodeError:
                node[leaf] = raw  # bare strings come through unquoted
        return TrainingConfig.from_json(obj)
