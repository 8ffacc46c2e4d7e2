"""Adaptive-moment optimizer over the gaussian parameter groups.

Moment state is keyed by parameter name and resized in lockstep with the
density-control operations (select / append) so surviving gaussians keep
their optimizer history.
"""

from __future__ import annotations

import numpy as np

from .splat import GaussianGrads, GaussianSet

PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "colors")


class AdamOptimizer:
    def __init__(self, gaussians: GaussianSet, lrs: dict[str, float],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(getattr(gaussians, k)) for k in PARAM_GROUPS}
        self.v = {k: np.zeros_like(getattr(gaussians, k)) for k in PARAM_GROUPS}

    def step(self, gaussians: GaussianSet, grads: GaussianGrads,
             lr_scales: dict[str, float] | None = None) -> float:
        """One update in place; returns the total parameter step norm."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        total = 0.0
        for key in PARAM_GROUPS:
            g = getattr(grads, key)
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            lr = self.lrs[key] * (1.0 if lr_scales is None else lr_scales.get(key, 1.0))
            upd = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            getattr(gaussians, key)[...] -= upd
            total += float(np.sum(upd * upd))
        return float(np.sqrt(total))

    def select(self, mask_or_idx) -> None:
        for k in PARAM_GROUPS:
            self.m[k] = self.m[k][mask_or_idx]
            self.v[k] = self.v[k][mask_or_idx]

    def append_zeros(self, count: int) -> None:
        for k in PARAM_GROUPS:
            pad = np.zeros((count,) + self.m[k].shape[1:])
            self.m[k] = np.concatenate([self.m[k], pad])
            self.v[k] = np.concatenate([self.v[k], pad])
