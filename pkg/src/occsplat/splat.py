"""Differentiable 3D Gaussian splatting on the CPU.

Gaussians are projected with a first-order perspective Jacobian, depth
sorted globally, and alpha-composited front to back. The backward pass is
fully analytic (verified against finite differences in the test suite) and
consistent with the forward's alpha clamp and early termination.

The rasterization loop is expressed as a flat list of (pixel, gaussian)
entries processed with segmented scans, which keeps everything vectorized
while remaining bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .body import JointTransforms, blended_point_transforms
from .errors import InvalidInput, InvalidState
from .rotations import (
    matrix_to_quat,
    quat_left_product_matrix,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    quat_to_matrix_jacobian,
)
from .validation import as_array

_SH_C1 = 0.4886025119029199


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y / (1.0 - y))


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera with an OpenCV-style world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))   # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = ""

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInput("camera: focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidInput("camera: image size must be at least 1x1")
        self.rotation = as_array(self.rotation, (3, 3), "camera rotation")
        self.translation = as_array(self.translation, (3,), "camera translation")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, focal: float,
                up=(0.0, 1.0, 0.0), name: str = "") -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        z = target - eye
        z = z / np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height, rotation=R, translation=-R @ eye, name=name)

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": [[float(v) for v in row] for row in self.rotation],
            "translation": [float(v) for v in self.translation],
            "name": self.name,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        return cls(fx=obj["fx"], fy=obj["fy"], cx=obj["cx"], cy=obj["cy"],
                   width=obj["width"], height=obj["height"],
                   rotation=np.array(obj["rotation"], dtype=np.float64),
                   translation=np.array(obj["translation"], dtype=np.float64),
                   name=obj.get("name", ""))


@dataclass
class RenderOutput:
    rgb: np.ndarray        # (H, W, 3) in [0, 1]
    occupancy: np.ndarray  # (H, W) accumulated alpha in [0, 1]
    depth: np.ndarray      # (H, W) camera z of the first surface, +inf where empty


@dataclass
class RasterSettings:
    """Rasterizer knobs; defaults are safe for gradient checks and oracles."""

    alpha_clamp: float = 0.99        # keeps 1/(1-alpha) bounded in the backward pass
    transmittance_min: float = 1e-4  # early termination threshold
    cutoff_sigma: float = 6.0        # bounding-box radius in projected std-devs
    alpha_min: float = 1e-8          # contributions below this are dropped
    near: float = 0.01
    dilation: float = 0.3            # px^2 added to the projected covariance diagonal


@dataclass
class GaussianSet:
    """The optimized representation: N skinned anisotropic Gaussians.

    Opacity is stored as a logit and scales in log space so that gradient
    steps stay unconstrained; activated values are exposed as properties.
    Colors hold spherical-harmonic coefficients; degree 0 is plain RGB.
    """

    positions: np.ndarray        # (N, 3)
    rotations: np.ndarray        # (N, 4) quaternions (w, x, y, z)
    log_scales: np.ndarray       # (N, 3)
    opacity_logits: np.ndarray   # (N,)
    colors: np.ndarray           # (N, C, 3); C = 1 for degree 0, 4 for degree 1
    skin_weights: np.ndarray | None = None  # (N, K)

    def __post_init__(self):
        self.positions = as_array(self.positions, (-1, 3), "positions")
        self.rotations = as_array(self.rotations, (-1, 4), "rotations")
        self.log_scales = as_array(self.log_scales, (-1, 3), "log_scales")
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64)
        self.colors = as_array(self.colors, (-1, -1, 3), "colors")
        if self.colors.shape[1] not in (1, 4):
            raise InvalidInput("colors: SH degree must be 0 (1 coeff) or 1 (4 coeffs)")
        if self.skin_weights is not None:
            self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return 0 if self.colors.shape[1] == 1 else 1

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.positions.copy(), self.rotations.copy(), self.log_scales.copy(),
            self.opacity_logits.copy(), self.colors.copy(),
            None if self.skin_weights is None else self.skin_weights.copy(),
        )

    def select(self, mask_or_idx) -> "GaussianSet":
        return GaussianSet(
            self.positions[mask_or_idx], self.rotations[mask_or_idx],
            self.log_scales[mask_or_idx], self.opacity_logits[mask_or_idx],
            self.colors[mask_or_idx],
            None if self.skin_weights is None else self.skin_weights[mask_or_idx],
        )

    @staticmethod
    def concatenate(parts: list["GaussianSet"]) -> "GaussianSet":
        has_w = parts[0].skin_weights is not None
        return GaussianSet(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.rotations for p in parts]),
            np.concatenate([p.log_scales for p in parts]),
            np.concatenate([p.opacity_logits for p in parts]),
            np.concatenate([p.colors for p in parts]),
            np.concatenate([p.skin_weights for p in parts]) if has_w else None,
        )

    def check_finite(self):
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors"):
            arr = getattr(self, name)
            bad = ~np.isfinite(arr)
            if bad.any():
                idx = int(np.argwhere(bad)[0][0])
                raise InvalidState(f"gaussian {idx}: non-finite {name}")


@dataclass
class GaussianGrads:
    """Gradients with respect to the raw (unconstrained) parameterization."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    contributed: np.ndarray  # (N,) bool: gaussian had at least one blended pixel

    @classmethod
    def zeros_like(cls, gs: GaussianSet) -> "GaussianGrads":
        return cls(
            np.zeros_like(gs.positions), np.zeros_like(gs.rotations),
            np.zeros_like(gs.log_scales), np.zeros_like(gs.opacity_logits),
            np.zeros_like(gs.colors), np.zeros(gs.n, dtype=bool),
        )


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def project_gaussians(gaussians: GaussianSet, camera: Camera,
                      settings: RasterSettings = RasterSettings()):
    """Project all Gaussians; behind-camera entries are culled, not errors.

    Returns (means2d (N, 2), covs2d (N, 2, 2), depths (N,), in_front (N,) bool).
    Culled rows carry NaN means/covs and the raw camera depth.
    """
    prep = _prepare(gaussians, camera, settings)
    means = np.full((gaussians.n, 2), np.nan)
    covs = np.full((gaussians.n, 2, 2), np.nan)
    depths = prep["mu_cam"][:, 2].copy()
    if prep["vis"].size:
        means[prep["vis"]] = prep["mean2d"]
        covs[prep["vis"]] = prep["cov2"]
    return means, covs, depths, prep["in_front"]


def _prepare(gaussians: GaussianSet, camera: Camera, settings: RasterSettings) -> dict:
    gaussians.check_finite()
    N = gaussians.n
    W = camera.rotation
    mu_cam = gaussians.positions @ W.T + camera.translation if N else np.zeros((0, 3))
    in_front = mu_cam[:, 2] > settings.near if N else np.zeros(0, dtype=bool)
    vis = np.flatnonzero(in_front)

    q_raw = gaussians.rotations[vis]
    q_norm = np.linalg.norm(q_raw, axis=1)
    q_hat = q_raw / q_norm[:, None] if vis.size else q_raw
    Rg = quat_to_matrix(q_hat) if vis.size else np.zeros((0, 3, 3))
    s = np.exp(gaussians.log_scales[vis])
    o = sigmoid(gaussians.opacity_logits[vis])

    x, y, z = mu_cam[vis, 0], mu_cam[vis, 1], mu_cam[vis, 2]
    u = camera.fx * x / z + camera.cx
    v = camera.fy * y / z + camera.cy
    mean2d = np.stack([u, v], axis=1)

    # first-order perspective Jacobian of (u, v) wrt camera-space position
    J = np.zeros((vis.size, 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * x / z**2
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * y / z**2

    WR = np.einsum("ab,nbc->nac", W, Rg)
    M3 = WR * s[:, None, :]
    V = np.einsum("nij,nkj->nik", M3, M3)          # camera-space 3D covariance
    cov2 = np.einsum("nij,njk,nlk->nil", J, V, J)  # J V J^T
    cov2[:, 0, 0] += settings.dilation
    cov2[:, 1, 1] += settings.dilation
    cov2 = 0.5 * (cov2 + cov2.transpose(0, 2, 1))

    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    inv = np.empty_like(cov2)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv[:, 0, 0] = cov2[:, 1, 1] / det
        inv[:, 1, 1] = cov2[:, 0, 0] / det
        inv[:, 0, 1] = inv[:, 1, 0] = -cov2[:, 0, 1] / det

    # per-gaussian evaluated color (clipped to [0,1]; mask reused in backward)
    coeffs = gaussians.colors[vis]
    if gaussians.sh_degree == 0:
        c_pre = coeffs[:, 0, :]
        dirs = None
        r_dir = None
    else:
        delta = gaussians.positions[vis] - camera.position
        r_dir = np.linalg.norm(delta, axis=1)
        dirs = delta / r_dir[:, None]
        c_pre = (coeffs[:, 0, :]
                 - _SH_C1 * dirs[:, 1:2] * coeffs[:, 1, :]
                 + _SH_C1 * dirs[:, 2:3] * coeffs[:, 2, :]
                 - _SH_C1 * dirs[:, 0:1] * coeffs[:, 3, :])
    c_eval = np.clip(c_pre, 0.0, 1.0)

    order = np.argsort(z, kind="stable")  # depth sort, front to back

    return {
        "mu_cam": mu_cam, "in_front": in_front, "vis": vis, "q_norm": q_norm,
        "q_hat": q_hat, "Rg": Rg, "s": s, "o": o, "mean2d": mean2d, "J": J,
        "V": V, "cov2": cov2, "inv": inv, "det": det, "c_pre": c_pre,
        "c_eval": c_eval, "dirs": dirs, "r_dir": r_dir, "order": order,
    }


def _make_entries(prep: dict, camera: Camera, settings: RasterSettings) -> dict:
    """Flatten (gaussian, pixel) pairs in depth order, grouped per gaussian."""
    H, Wd = camera.height, camera.width
    order = prep["order"]
    nv = order.size
    empty = {
        "pix": np.zeros(0, dtype=np.int64), "gvis": np.zeros(0, dtype=np.int64),
        "alpha": np.zeros(0), "G": np.zeros(0), "dx": np.zeros(0), "dy": np.zeros(0),
        "sort": np.zeros(0, dtype=np.int64),
    }
    if nv == 0:
        return empty

    mean2d = prep["mean2d"][order]
    inv = prep["inv"][order]
    cov2 = prep["cov2"][order]
    o = prep["o"][order]

    lam_max = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1]) + np.sqrt(
        np.maximum(0.25 * (cov2[:, 0, 0] - cov2[:, 1, 1]) ** 2 + cov2[:, 0, 1] ** 2, 0.0)
    )
    r = settings.cutoff_sigma * np.sqrt(np.maximum(lam_max, 0.0))
    x0 = np.clip(np.floor(mean2d[:, 0] - r).astype(np.int64), 0, Wd)
    x1 = np.clip(np.ceil(mean2d[:, 0] + r).astype(np.int64) + 1, 0, Wd)
    y0 = np.clip(np.floor(mean2d[:, 1] - r).astype(np.int64), 0, H)
    y1 = np.clip(np.ceil(mean2d[:, 1] + r).astype(np.int64) + 1, 0, H)
    bw = np.maximum(x1 - x0, 0)
    bh = np.maximum(y1 - y0, 0)
    counts = bw * bh
    total = int(counts.sum())
    if total == 0:
        return empty

    rank = np.repeat(np.arange(nv, dtype=np.int32), counts)  # depth-ordered index
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    widths = np.maximum(bw[rank], 1)
    ly, lx = np.divmod(within, widths)
    px = (x0[rank] + lx).astype(np.int32)
    py = (y0[rank] + ly).astype(np.int32)
    pix = py * np.int32(Wd) + px

    dx = (px + 0.5) - mean2d[rank, 0]
    dy = (py + 0.5) - mean2d[rank, 1]
    qf = inv[rank, 0, 0] * dx * dx + 2.0 * inv[rank, 0, 1] * dx * dy + inv[rank, 1, 1] * dy * dy
    G = np.exp(-0.5 * qf)
    alpha = np.minimum(o[rank] * G, settings.alpha_clamp)

    keep = alpha >= settings.alpha_min
    pix, rank, alpha, G, dx, dy = pix[keep], rank[keep], alpha[keep], G[keep], dx[keep], dy[keep]

    # stable sort by pixel keeps depth order within each pixel's segment
    sort = np.argsort(pix, kind="stable")
    return {
        "pix": pix[sort], "gvis": prep["order"][rank[sort]], "alpha": alpha[sort],
        "G": G[sort], "dx": dx[sort], "dy": dy[sort], "sort": sort,
    }


def _transmittance(entries: dict, n_pixels: int, settings: RasterSettings):
    """Per-entry transmittance before blending, processed mask, final T image."""
    pix = entries["pix"]
    alpha = entries["alpha"]
    m = pix.size
    if m == 0:
        return np.zeros(0), np.zeros(0, dtype=bool), np.ones(n_pixels)
    l1a = np.log1p(-alpha)
    cs0 = np.concatenate([[0.0], np.cumsum(l1a)[:-1]])  # prefix sums excluding self
    seg_start = np.zeros(m, dtype=bool)
    seg_start[0] = True
    seg_start[1:] = pix[1:] != pix[:-1]
    start_idx = np.maximum.accumulate(np.where(seg_start, np.arange(m), 0))
    log_T_before = cs0 - cs0[start_idx]
    T_before = np.exp(log_T_before)
    processed = T_before >= settings.transmittance_min
    log_T_end = np.bincount(pix, weights=l1a * processed, minlength=n_pixels)
    T_end = np.exp(log_T_end)
    return T_before, processed, T_end


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


@dataclass
class RenderInternals:
    """Cached rasterization state so a backward pass can skip the replay."""

    prep: dict
    entries: dict
    T_before: np.ndarray
    processed: np.ndarray
    T_end: np.ndarray


def render(gaussians: GaussianSet, camera: Camera, background=(0.0, 0.0, 0.0),
           settings: RasterSettings = RasterSettings(), return_internals: bool = False):
    """Alpha-composite all Gaussians into rgb, occupancy and depth images."""
    bg = as_array(background, (3,), "background")
    H, Wd = camera.height, camera.width
    npix = H * Wd

    prep = _prepare(gaussians, camera, settings)
    entries = _make_entries(prep, camera, settings)
    T_before, processed, T_end = _transmittance(entries, npix, settings)

    pix, gvis = entries["pix"], entries["gvis"]
    w = entries["alpha"] * T_before * processed
    rgb_flat = np.empty((npix, 3))
    c_eval = prep["c_eval"]
    for ch in range(3):
        cw = np.bincount(pix, weights=w * c_eval[_vis_index(prep, gvis), ch], minlength=npix)
        rgb_flat[:, ch] = cw + bg[ch] * T_end

    occupancy = (1.0 - T_end).reshape(H, Wd)

    depth_flat = np.full(npix, np.inf)
    if pix.size:
        T_after = T_before * (1.0 - entries["alpha"])
        cand = np.flatnonzero(processed & (T_after <= 0.5))
        if cand.size:
            uniq, first = np.unique(pix[cand], return_index=True)
            zvals = prep["mu_cam"][prep["vis"], 2][_vis_index(prep, gvis[cand[first]])]
            depth_flat[uniq] = zvals

    out = RenderOutput(
        rgb=np.clip(rgb_flat, 0.0, 1.0).reshape(H, Wd, 3),
        occupancy=np.clip(occupancy, 0.0, 1.0),
        depth=depth_flat.reshape(H, Wd),
    )
    if return_internals:
        return out, RenderInternals(prep, entries, T_before, processed, T_end)
    return out


def _vis_index(prep: dict, gvis: np.ndarray) -> np.ndarray:
    """Map global gaussian indices back to rows of the per-visible arrays."""
    lut = prep.setdefault("_vis_lut", None)
    if lut is None:
        lut = np.full(int(prep["in_front"].shape[0]), -1, dtype=np.int64)
        lut[prep["vis"]] = np.arange(prep["vis"].size)
        prep["_vis_lut"] = lut
    return lut[gvis]


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


def render_backward(gaussians: GaussianSet, camera: Camera, grad_rgb, grad_occupancy,
                    background=(0.0, 0.0, 0.0),
                    settings: RasterSettings = RasterSettings(),
                    internals: RenderInternals | None = None) -> GaussianGrads:
    """Analytic gradients of (rgb, occupancy) wrt all Gaussian parameters.

    grad_rgb: (H, W, 3) upstream gradient on the composited image.
    grad_occupancy: (H, W) upstream gradient on accumulated alpha.
    `internals` (from `render(..., return_internals=True)`) skips replaying
    the forward rasterization state; results are identical either way.
    """
    bg = as_array(background, (3,), "background")
    H, Wd = camera.height, camera.width
    npix = H * Wd
    g_rgb = as_array(grad_rgb, (H, Wd, 3), "grad_rgb").reshape(npix, 3)
    g_occ = as_array(grad_occupancy, (H, Wd), "grad_occupancy").reshape(npix)

    grads = GaussianGrads.zeros_like(gaussians)
    if internals is None:
        prep = _prepare(gaussians, camera, settings)
        entries = _make_entries(prep, camera, settings)
        T_before, processed, T_end = _transmittance(entries, npix, settings)
    else:
        prep, entries = internals.prep, internals.entries
        T_before, processed, T_end = (internals.T_before, internals.processed,
                                      internals.T_end)
    pix, gvis = entries["pix"], entries["gvis"]
    m = pix.size
    if m == 0:
        return grads

    vrow = _vis_index(prep, gvis)
    alpha, G, dx, dy = entries["alpha"], entries["G"], entries["dx"], entries["dy"]
    o_e = prep["o"][vrow]
    w = alpha * T_before * processed
    one_m_a = 1.0 - alpha

    rgb_active = bool(np.any(g_rgb))
    if rgb_active:
        c_e = prep["c_eval"][vrow]      # (m, 3)
        # strict suffix sums of color contributions within each pixel segment
        seg_start = np.zeros(m, dtype=bool)
        seg_start[0] = True
        seg_start[1:] = pix[1:] != pix[:-1]
        start_idx = np.maximum.accumulate(np.where(seg_start, np.arange(m), 0))
        cw = w[:, None] * c_e           # (m, 3)
        csum = np.cumsum(cw, axis=0)
        base = csum[start_idx] - cw[start_idx]
        prefix_incl = csum - base
        seg_total = np.stack([np.bincount(pix, weights=cw[:, ch], minlength=npix)
                              for ch in range(3)], axis=1)
        S_after = seg_total[pix] - prefix_incl + T_end[pix, None] * bg[None, :]
        gC = g_rgb[pix]                 # (m, 3)
        dLda = np.einsum("mc,mc->m",
                         gC, T_before[:, None] * c_e - S_after / one_m_a[:, None])
    else:
        dLda = np.zeros(m)
    gA = g_occ[pix]
    dLda += gA * T_end[pix] / one_m_a
    dLda *= processed

    nv = prep["vis"].size
    unclamped = (prep["o"][vrow] * G) < settings.alpha_clamp

    def acc(weights):
        return np.bincount(vrow, weights=weights, minlength=nv)

    # opacity and color
    g_o = acc(dLda * G * unclamped)
    if rgb_active:
        gc_vis = np.stack([acc(gC[:, ch] * w) for ch in range(3)], axis=1)
    else:
        gc_vis = np.zeros((nv, 3))

    # quadratic form partials
    gq = dLda * o_e * (-0.5) * G * unclamped
    inv_e = prep["inv"][vrow]
    Qd_x = inv_e[:, 0, 0] * dx + inv_e[:, 0, 1] * dy
    Qd_y = inv_e[:, 0, 1] * dx + inv_e[:, 1, 1] * dy
    gm = np.stack([acc(gq * (-2.0) * Qd_x), acc(gq * (-2.0) * Qd_y)], axis=1)
    gQa = acc(gq * dx * dx)
    gQb = acc(gq * dx * dy)
    gQc = acc(gq * dy * dy)

    contributed_vis = acc(processed.astype(np.float64)) > 0

    # ---- chain per visible gaussian (vectorized over nv) ----
    inv_v = prep["inv"]
    GQ = np.empty((nv, 2, 2))
    GQ[:, 0, 0], GQ[:, 0, 1], GQ[:, 1, 0], GQ[:, 1, 1] = gQa, gQb, gQb, gQc
    G2 = -np.einsum("nij,njk,nkl->nil", inv_v, GQ, inv_v)   # dL/d cov2

    J, V = prep["J"], prep["V"]
    GV = np.einsum("nji,njk,nkl->nil", J, G2, J)            # dL/dV
    W = camera.rotation
    GS3 = np.einsum("ji,njk,kl->nil", W, GV, W)             # dL/d Sigma3 (world)

    # J depends on the camera-space mean; add that path to the mean gradient
    x, y, z = (prep["mu_cam"][prep["vis"], i] for i in range(3))
    Mv = np.einsum("nij,nkj->nik", V, J)                    # V J^T, (nv, 3, 2)
    fx, fy = camera.fx, camera.fy
    gmu_cam = np.einsum("nji,nj->ni", J, gm)                # mean-projection path
    gmu_cam[:, 0] += 2.0 * (-fx / z**2) * (G2[:, 0, 0] * Mv[:, 2, 0] + G2[:, 0, 1] * Mv[:, 2, 1])
    gmu_cam[:, 1] += 2.0 * (-fy / z**2) * (G2[:, 0, 1] * Mv[:, 2, 0] + G2[:, 1, 1] * Mv[:, 2, 1])
    Xz00 = -fx / z**2 * Mv[:, 0, 0] + 2.0 * fx * x / z**3 * Mv[:, 2, 0]
    Xz01 = -fx / z**2 * Mv[:, 0, 1] + 2.0 * fx * x / z**3 * Mv[:, 2, 1]
    Xz10 = -fy / z**2 * Mv[:, 1, 0] + 2.0 * fy * y / z**3 * Mv[:, 2, 0]
    Xz11 = -fy / z**2 * Mv[:, 1, 1] + 2.0 * fy * y / z**3 * Mv[:, 2, 1]
    gmu_cam[:, 2] += 2.0 * (G2[:, 0, 0] * Xz00 + G2[:, 0, 1] * (Xz01 + Xz10) + G2[:, 1, 1] * Xz11)

    gpos_vis = gmu_cam @ W  # rows: dL/dmu_world = W^T dL/dmu_cam

    # scales (through Sigma3 = R diag(s^2) R^T)
    Rg, s = prep["Rg"], prep["s"]
    RtGR = np.einsum("nji,njk,nkl->nil", Rg, GS3, Rg)
    g_s = 2.0 * s * np.stack([RtGR[:, 0, 0], RtGR[:, 1, 1], RtGR[:, 2, 2]], axis=1)
    g_log_s = g_s * s

    # rotations (through Sigma3), then quaternion normalization
    D = s**2
    g_R = 2.0 * np.einsum("nij,njk->nik", GS3, Rg) * D[:, None, :]
    dRdq = quat_to_matrix_jacobian(prep["q_hat"])
    g_qhat = np.einsum("nij,nkij->nk", g_R, dRdq)

    # color chain (clip mask, SH)
    clip_ok = (prep["c_pre"] > 0.0) & (prep["c_pre"] < 1.0)
    gc_masked = gc_vis * clip_ok
    gcolors_vis = np.zeros((nv,) + gaussians.colors.shape[1:])
    gcolors_vis[:, 0, :] = gc_masked
    if gaussians.sh_degree == 1:
        dirs, r_dir = prep["dirs"], prep["r_dir"]
        coeffs = gaussians.colors[prep["vis"]]
        gcolors_vis[:, 1, :] = -_SH_C1 * dirs[:, 1:2] * gc_masked
        gcolors_vis[:, 2, :] = _SH_C1 * dirs[:, 2:3] * gc_masked
        gcolors_vis[:, 3, :] = -_SH_C1 * dirs[:, 0:1] * gc_masked
        g_dir = np.zeros((nv, 3))
        g_dir[:, 1] -= _SH_C1 * np.sum(gc_masked * coeffs[:, 1, :], axis=1)
        g_dir[:, 2] += _SH_C1 * np.sum(gc_masked * coeffs[:, 2, :], axis=1)
        g_dir[:, 0] -= _SH_C1 * np.sum(gc_masked * coeffs[:, 3, :], axis=1)
        g_dir -= dirs * np.sum(dirs * g_dir, axis=1, keepdims=True)
        gpos_vis += g_dir / r_dir[:, None]

    o_v = prep["o"]
    g_logit_vis = g_o * o_v * (1.0 - o_v)
    q_hat, q_norm = prep["q_hat"], prep["q_norm"]
    g_q_vis = (g_qhat - q_hat * np.sum(q_hat * g_qhat, axis=1, keepdims=True)) / q_norm[:, None]

    vis = prep["vis"]
    grads.positions[vis] = gpos_vis
    grads.rotations[vis] = g_q_vis
    grads.log_scales[vis] = g_log_s
    grads.opacity_logits[vis] = g_logit_vis
    grads.colors[vis] = gcolors_vis
    grads.contributed[vis] = contributed_vis
    return grads


# ---------------------------------------------------------------------------
# Posing through linear blend skinning
# ---------------------------------------------------------------------------


@dataclass
class PoseContext:
    """Saved per-gaussian blend data for backpropagating through posing."""

    blend_matrices: np.ndarray   # (N, 3, 3)
    blend_quats: np.ndarray      # (N, 4)


def pose_gaussians(gaussians: GaussianSet, transforms: JointTransforms,
                   return_context: bool = False):
    """Move canonical Gaussians into a posed space via skinned blending.

    Centers follow the blended affine map; each orientation is composed with
    the weight-blended joint rotation (sign-aligned weighted quaternion
    average, renormalized). Scales, opacities and colors are unchanged.
    """
    if gaussians.skin_weights is None:
        raise InvalidState("gaussians have no skinning weights")
    A, b = blended_point_transforms(gaussians.skin_weights, transforms)
    new_pos = np.einsum("nij,nj->ni", A, gaussians.positions) + b

    qk = matrix_to_quat(transforms.rotations)              # (K, 4)
    ref = qk[np.argmax(gaussians.skin_weights, axis=1)]    # (N, 4)
    signs = np.where(ref @ qk.T < 0, -1.0, 1.0)            # per-gaussian hemisphere alignment
    qb = quat_normalize((gaussians.skin_weights * signs) @ qk)
    new_rot = quat_multiply(qb, gaussians.rotations)

    posed = GaussianSet(new_pos, new_rot, gaussians.log_scales.copy(),
                        gaussians.opacity_logits.copy(), gaussians.colors.copy(),
                        gaussians.skin_weights.copy())
    if return_context:
        return posed, PoseContext(A, qb)
    return posed


def pose_backward(context: PoseContext, grads: GaussianGrads) -> GaussianGrads:
    """Pull posed-space gradients back to the canonical parameterization."""
    g_pos = np.einsum("nji,nj->ni", context.blend_matrices, grads.positions)
    L = quat_left_product_matrix(context.blend_quats)
    g_rot = np.einsum("nji,nj->ni", L, grads.rotations)
    return replace(grads, positions=g_pos, rotations=g_rot)
