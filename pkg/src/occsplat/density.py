"""Adaptive density control: clone, split, prune, and KL-based merging."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInput
from .optim import AdamOptimizer
from .rotations import matrix_to_quat, quat_to_matrix
from .splat import GaussianSet, inverse_sigmoid, sigmoid


def scene_extent(gaussians: GaussianSet) -> float:
    if gaussians.n == 0:
        return 1.0
    center = gaussians.positions.mean(axis=0)
    return float(np.linalg.norm(gaussians.positions - center, axis=1).max()) or 1.0


def gaussian_covariances(gs: GaussianSet, idx=None) -> np.ndarray:
    sel = slice(None) if idx is None else idx
    R = quat_to_matrix(gs.rotations[sel] / np.linalg.norm(gs.rotations[sel], axis=-1, keepdims=True))
    s2 = np.exp(gs.log_scales[sel]) ** 2
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


def gaussian_kl(mu0, cov0, mu1, cov1) -> float:
    """Closed-form KL(N0 || N1) for 3D Gaussians."""
    inv1 = np.linalg.inv(cov1)
    d = np.asarray(mu1, dtype=np.float64) - np.asarray(mu0, dtype=np.float64)
    _, logdet0 = np.linalg.slogdet(cov0)
    _, logdet1 = np.linalg.slogdet(cov1)
    return float(0.5 * (np.trace(inv1 @ cov0) + d @ inv1 @ d - 3.0 + logdet1 - logdet0))


def symmetric_kl(mu0, cov0, mu1, cov1) -> float:
    return 0.5 * (gaussian_kl(mu0, cov0, mu1, cov1) + gaussian_kl(mu1, cov1, mu0, cov0))


def densify_and_prune(gaussians: GaussianSet, mean_grads: np.ndarray, config,
                      rng: np.random.Generator, optimizer: AdamOptimizer | None = None,
                      extent: float | None = None) -> GaussianSet:
    """Clone small high-gradient gaussians, split large ones, prune faint ones.

    `mean_grads`: per-gaussian mean positional gradient norm over the
    accumulation window. In frozen-density mode this is a no-op. Split
    children shrink scales by the split factor and sample their centers
    inside the parent's one-sigma ellipsoid: u ~ N(0, I) projected into the
    unit ball (u / max(1, |u|)), offset = R diag(s) u.
    """
    if config.freeze_density or gaussians.n == 0:
        return gaussians
    if mean_grads.shape != (gaussians.n,):
        raise InvalidInput("mean_grads length must match gaussian count")
    ext = scene_extent(gaussians) if extent is None else extent
    scales = gaussians.scales
    big = scales.max(axis=1) >= config.densify_scale_fraction * ext
    hot = mean_grads > config.densify_grad_threshold
    clone_mask = hot & ~big
    split_mask = hot & big

    keep = ~split_mask & (gaussians.opacities >= config.prune_opacity)
    parts = [gaussians.select(keep)]
    if optimizer is not None:
        optimizer.select(keep)
    appended = 0

    if clone_mask.any():
        clones = gaussians.select(clone_mask & keep)
        parts.append(clones)
        appended += clones.n

    if split_mask.any():
        parents = gaussians.select(split_mask)
        R = quat_to_matrix(parents.rotations / np.linalg.norm(parents.rotations, axis=-1, keepdims=True))
        s = parents.scales
        children = []
        for _ in range(2):
            u = rng.standard_normal((parents.n, 3))
            u /= np.maximum(1.0, np.linalg.norm(u, axis=1, keepdims=True))
            offs = np.einsum("nij,nj->ni", R, s * u)
            child = parents.copy()
            child.positions = parents.positions + offs
            child.log_scales = parents.log_scales - np.log(config.split_factor)
            children.append(child)
        kids = GaussianSet.concatenate(children)
        parts.append(kids)
        appended += kids.n

    out = GaussianSet.concatenate(parts) if len(parts) > 1 else parts[0]
    if optimizer is not None and appended:
        optimizer.append_zeros(appended)
    return out


def merge_kl(gaussians: GaussianSet, threshold: float,
             optimizer: AdamOptimizer | None = None, return_mapping: bool = False):
    """Fuse nearest-neighbor pairs whose symmetric KL falls below `threshold`.

    Pairs merge into an opacity-weighted moment-matched gaussian with summed
    (clamped) opacity; each gaussian participates in at most one merge per
    call, lowest-divergence pairs first. With `return_mapping`, also returns
    an array mapping each output row to its source row (-1 for fused rows),
    so per-gaussian statistics can follow the reordering.
    """
    if threshold <= 0:
        raise InvalidInput("merge threshold must be positive")
    n = gaussians.n

    def _done(out, mapping):
        return (out, mapping) if return_mapping else out

    if n < 2:
        return _done(gaussians, np.arange(n))

    tree = cKDTree(gaussians.positions)
    dist, nn = tree.query(gaussians.positions, k=2)
    # with coincident points the self-row can land in either column
    partner = np.where(nn[:, 1] != np.arange(n), nn[:, 1], nn[:, 0])
    pairs = {(min(i, j), max(i, j)) for i, j in enumerate(partner) if i != j}

    covs = gaussian_covariances(gaussians)
    scored = []
    for i, j in pairs:
        kl = symmetric_kl(gaussians.positions[i], covs[i], gaussians.positions[j], covs[j])
        if kl < threshold:
            scored.append((kl, i, j))
    if not scored:
        return _done(gaussians, np.arange(n))
    scored.sort()

    used = np.zeros(n, dtype=bool)
    merged_rows = []
    for _, i, j in scored:
        if used[i] or used[j]:
            continue
        used[i] = used[j] = True
        merged_rows.append(_moment_match(gaussians, covs, i, j))

    survivors = np.flatnonzero(~used)
    parts = [gaussians.select(survivors)]
    if optimizer is not None:
        optimizer.select(survivors)
    parts.extend(merged_rows)
    out = GaussianSet.concatenate(parts)
    if optimizer is not None:
        optimizer.append_zeros(len(merged_rows))
    mapping = np.concatenate([survivors, np.full(len(merged_rows), -1, dtype=np.int64)])
    return _done(out, mapping)


def _moment_match(gs: GaussianSet, covs: np.ndarray, i: int, j: int) -> GaussianSet:
    o = gs.opacities
    wi = o[i] / max(o[i] + o[j], 1e-12)
    wj = 1.0 - wi
    mu = wi * gs.positions[i] + wj * gs.positions[j]
    di = gs.positions[i] - mu
    dj = gs.positions[j] - mu
    cov = wi * (covs[i] + np.outer(di, di)) + wj * (covs[j] + np.outer(dj, dj))
    cov = 0.5 * (cov + cov.T)

    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.maximum(eigvals, 1e-12)
    # deterministic sign convention, proper rotation
    for c in range(3):
        k = np.argmax(np.abs(eigvecs[:, c]))
        if eigvecs[k, c] < 0:
            eigvecs[:, c] *= -1
    if np.linalg.det(eigvecs) < 0:
        eigvecs[:, 2] *= -1

    new_opacity = min(o[i] + o[j], 1.0 - 1e-4)
    weights = None
    if gs.skin_weights is not None:
        weights = wi * gs.skin_weights[i] + wj * gs.skin_weights[j]
        weights = (weights / weights.sum())[None]
    return GaussianSet(
        positions=mu[None],
        rotations=matrix_to_quat(eigvecs)[None],
        log_scales=0.5 * np.log(eigvals)[None],
        opacity_logits=np.array([inverse_sigmoid(max(new_opacity, 1e-4))]),
        colors=(wi * gs.colors[i] + wj * gs.colors[j])[None],
        skin_weights=weights,
    )


def prune_only(gaussians: GaussianSet, min_opacity: float,
               optimizer: AdamOptimizer | None = None) -> GaussianSet:
    keep = gaussians.opacities >= min_opacity
    if keep.all():
        return gaussians
    if optimizer is not None:
        optimizer.select(keep)
    return gaussians.select(keep)


__all__ = [
    "densify_and_prune", "merge_kl", "gaussian_kl", "symmetric_kl",
    "scene_extent", "gaussian_covariances", "prune_only", "sigmoid",
]
