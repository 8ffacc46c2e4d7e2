"""Service configuration."""

from __future__ import annotations

from dataclasses import dataclass, field

from occsplat.prior import DiffusionSchedule


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8791
    backend: str = "mock:silhouette"   # mock:<mode> or "diffusion"
    max_request_bytes: int = 64 * 1024 * 1024

    # defaults applied when a request omits the fields
    default_steps: int = 10
    default_conditioning_scale_init: float = 1.0
    default_conditioning_scale_refine: float = 0.3

    # mock parameters (must mirror the in-process mock for byte parity)
    offset_delta: float = 0.1
    widen: float = 1.05
    edge_pad_ratio: float = 0.03
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)

    # diffusion backend (optional)
    inpaint_model: str = "stabilityai/stable-diffusion-2-inpainting"
    pose_controlnet: str = ""
    segmentation_model: str = ""
    device: str = "cpu"

    def __post_init__(self):
        if not (0 < self.port < 65536):
            raise ValueError(f"invalid port {self.port}")
        if self.max_request_bytes <= 0:
            raise ValueError("max_request_bytes must be positive")
        if isinstance(self.schedule, dict):
            self.schedule = DiffusionSchedule.from_json(self.schedule)
