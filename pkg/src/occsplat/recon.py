"""Estimator-style facade over the reconstruction pipeline.

Follows the fit/predict and get_params/set_params conventions so the
reconstructor composes with estimator tooling; the heavy lifting lives in
`pipeline`.
"""

from __future__ import annotations

import numpy as np

from .body import Skeleton, default_skeleton, skinning_transforms
from .config import TrainingConfig
from .errors import InvalidInput, InvalidState
from .losses import eval_metrics
from .pipeline import Frame, Trainer
from .prior import PriorBackend, make_backend
from .splat import Camera, RenderOutput, pose_gaussians, render


class AvatarReconstructor:
    """Fits skinned gaussians to partially occluded observations.

    Parameters mirror the constructor arguments (sklearn convention); all
    fitted state lands in trailing-underscore attributes.
    """

    def __init__(self, config: TrainingConfig | None = None,
                 backend: str | PriorBackend = "mock:silhouette",
                 stages: tuple = ("init", "optimize", "refine"),
                 background=(0.0, 0.0, 0.0), out_dir=None):
        self.config = config
        self.backend = backend
        self.stages = stages
        self.background = background
        self.out_dir = out_dir

    # -- sklearn-style parameter plumbing ---------------------------------

    def get_params(self, deep: bool = True) -> dict:
        return {
            "config": self.config, "backend": self.backend, "stages": self.stages,
            "background": self.background, "out_dir": self.out_dir,
        }

    def set_params(self, **params) -> "AvatarReconstructor":
        for key, value in params.items():
            if key not in self.get_params():
                raise InvalidInput(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    # -- fitting -----------------------------------------------------------

    def fit(self, frames: list[Frame], skeleton: Skeleton | None = None) -> "AvatarReconstructor":
        if not frames:
            raise InvalidInput("fit requires at least one frame")
        for f in frames:
            if not isinstance(f, Frame):
                raise InvalidInput("fit expects a list of Frame objects")
        self.skeleton_ = skeleton if skeleton is not None else default_skeleton()
        for f in frames:
            if f.pose.rotations.shape[0] != self.skeleton_.joint_count:
                raise InvalidInput(f"frame {f.index}: pose joint count mismatch")
        config = self.config if self.config is not None else TrainingConfig()
        backend = (self.backend if isinstance(self.backend, PriorBackend)
                   else make_backend(self.backend, skeleton=self.skeleton_,
                                     schedule=config.schedule))
        trainer = Trainer(frames, self.skeleton_, config, backend,
                          out_dir=self.out_dir, background=self.background)
        results = trainer.run(stages=self.stages)
        self.gaussians_ = results["gaussians"]
        self.artifacts_ = results["artifacts"]
        self.results_ = results
        return self

    def _check_fitted(self):
        if not hasattr(self, "gaussians_"):
            raise InvalidState("reconstructor is not fitted; call fit() first")

    # -- inference ---------------------------------------------------------

    def render_view(self, pose, camera: Camera) -> RenderOutput:
        self._check_fitted()
        posed = pose_gaussians(self.gaussians_,
                               skinning_transforms(self.skeleton_, pose))
        return render(posed, camera, background=self.background)

    def predict(self, views: list[tuple]) -> list[RenderOutput]:
        """Render a list of (pose, camera) views from the fitted body."""
        return [self.render_view(pose, camera) for pose, camera in views]

    def score(self, frames: list[Frame]) -> float:
        """Mean visible-pixel PSNR of re-rendered training views (higher is better)."""
        self._check_fitted()
        vals = []
        for f in frames:
            out = self.render_view(f.pose, f.camera)
            m = eval_metrics(out.rgb, f.image, visible_mask=f.mask)
            if m["valid"]:
                vals.append(m["psnr"])
        if not vals:
            raise InvalidInput("no frames with visible pixels to score")
        return float(np.mean(vals))
