"""Scalar objectives and evaluation metrics, with analytic gradients.

All reductions are per-pixel means; the large stage weights are calibrated
against that convention. Convolutions use zero padding so every operator is
exactly self-adjoint (or sign-flipped for the difference kernels), which
keeps the hand-written gradients in lockstep with finite differences.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d, minimum_filter

from .errors import InvalidInput
from .splat import RenderOutput
from .validation import as_array, check_same_shape

_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03

# perceptual proxy constants: octave blur sigmas, band weights, gradient-term weight
_PROXY_SIGMAS = (1.0, 2.0, 4.0)
_PROXY_BAND_WEIGHTS = (0.5, 1.0, 2.0)
_PROXY_GRAD_WEIGHT = 1.0
_DIFF_KERNEL = np.array([-0.5, 0.0, 0.5])


@dataclass
class LossWeights:
    """Non-negative weights for every objective term."""

    rgb: float = 1.0
    mask: float = 1.0
    ssim: float = 0.0
    lpips: float = 0.0
    pose: float = 0.0
    can: float = 0.0
    gen: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise InvalidInput(f"loss weight {f.name} must be finite and >= 0")
            setattr(self, f.name, v)

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, obj: dict) -> "LossWeights":
        return cls(**obj)


# ---------------------------------------------------------------------------
# Elementary losses
# ---------------------------------------------------------------------------


def l1_masked(a, b, mask) -> float:
    """Mean absolute difference over masked pixels and channels; 0 if empty."""
    v, _ = _l1_masked_grad(a, b, mask)
    return v


def _l1_masked_grad(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    check_same_shape(a, b, "l1 inputs")
    if m.shape != a.shape[: m.ndim]:
        raise InvalidInput(f"mask shape {m.shape} incompatible with image {a.shape}")
    count = float(m.sum())
    if a.ndim == 3 and m.ndim == 2:
        m = m[..., None]
        count *= a.shape[-1]
    if count == 0:
        return 0.0, np.zeros_like(b)
    diff = (b - a) * m
    value = float(np.abs(diff).sum() / count)
    grad_b = np.sign(diff) * m / count
    return value, grad_b


def l2_mask(m_hat, a) -> float:
    """Mean squared difference between a target mask and an occupancy map."""
    v, _ = _l2_mask_grad(m_hat, a)
    return v


def _l2_mask_grad(m_hat, a):
    m_hat = np.asarray(m_hat, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    check_same_shape(m_hat, a, "l2 inputs")
    diff = a - m_hat
    value = float(np.mean(diff**2))
    grad_a = 2.0 * diff / diff.size
    return value, grad_a


# ---------------------------------------------------------------------------
# SSIM (11x11 Gaussian window, valid region)
# ---------------------------------------------------------------------------


def _gauss_kernel(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


_SSIM_KERNEL = _gauss_kernel(_SSIM_SIGMA, _SSIM_WIN // 2)


def _filter_same(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = correlate1d(img, k, axis=0, mode="constant")
    return correlate1d(out, k, axis=1, mode="constant")


def _as_channels(img, name) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr[..., None]
    if arr.ndim == 3:
        return arr
    raise InvalidInput(f"{name}: expected 2d or 3d image")


def ssim(a, b) -> float:
    """Mean local SSIM over fully valid windows; inputs in [0, 1]."""
    v, _ = _ssim_grad(a, b, need_grad=False)
    return v


def _ssim_grad(a, b, need_grad=True, window_mask=None):
    """Returns (mean SSIM, d mean SSIM / d b).

    `window_mask`: optional boolean (H, W) selecting window centers (already
    restricted to the valid region) to include in the mean.
    """
    A = _as_channels(a, "ssim a")
    B = _as_channels(b, "ssim b")
    check_same_shape(A, B, "ssim inputs")
    H, W = A.shape[:2]
    r = _SSIM_WIN // 2
    if H < _SSIM_WIN or W < _SSIM_WIN:
        raise InvalidInput(f"ssim: image must be at least {_SSIM_WIN}px per side")
    C1, C2 = _SSIM_K1**2, _SSIM_K2**2
    k = _SSIM_KERNEL
    sl = (slice(r, H - r), slice(r, W - r))

    ma = _filter_same(A, k)[sl]
    mb = _filter_same(B, k)[sl]
    maa = _filter_same(A * A, k)[sl]
    mbb = _filter_same(B * B, k)[sl]
    mab = _filter_same(A * B, k)[sl]

    A1 = 2 * ma * mb + C1
    A2 = 2 * (mab - ma * mb) + C2
    B1 = ma**2 + mb**2 + C1
    B2 = (maa - ma**2) + (mbb - mb**2) + C2
    # q1 and q2 are exactly 1.0 when the images are bitwise equal; every
    # gradient below is arranged so those cases cancel exactly (otherwise
    # float dust survives and an adaptive optimizer amplifies it)
    q1 = A1 / B1
    q2 = A2 / B2
    s = q1 * q2

    if window_mask is not None:
        sel = window_mask[sl]
        n_eff = float(sel.sum()) * s.shape[2]
        if n_eff == 0:
            return float("nan"), None
        value = float(s[sel].sum() / n_eff)
        weight = sel[..., None] / n_eff
    else:
        n_eff = s.size
        value = float(s.mean())
        weight = np.full(s.shape[:2] + (1,), 1.0 / n_eff)

    if not need_grad:
        return value, None

    # partials of s wrt the filtered moments of b
    ds_dmb = (2 / (B1 * B2)) * (ma * (A2 - A1) - mb * s * (B2 - B1))
    ds_dmbb = -(q1 * q2) / B2
    ds_dmab = 2 * (q1 / B2)

    def adjoint(g_valid):
        buf = np.zeros_like(B)
        buf[sl] = g_valid
        return _filter_same(buf, k)  # symmetric kernel: adjoint == filter

    g_mb = adjoint(ds_dmb * weight)
    g_mbb = adjoint(ds_dmbb * weight)
    g_mab = adjoint(ds_dmab * weight)
    grad_b = g_mb + 2 * B * g_mbb + A * g_mab
    if np.asarray(b).ndim == 2:
        grad_b = grad_b[..., 0]
    return value, grad_b


# ---------------------------------------------------------------------------
# Perceptual proxy: pyramid band-pass + gradient magnitudes
# ---------------------------------------------------------------------------


def _proxy_blurs(x: np.ndarray) -> list[np.ndarray]:
    out = []
    for s in _PROXY_SIGMAS:
        k = _gauss_kernel(s, int(np.ceil(3 * s)))
        out.append(_filter_same(x, k))
    return out


def _diff_xy(x: np.ndarray):
    gx = correlate1d(x, _DIFF_KERNEL, axis=1, mode="constant")
    gy = correlate1d(x, _DIFF_KERNEL, axis=0, mode="constant")
    return gx, gy


def perceptual_proxy(a, b) -> float:
    """Deterministic perceptual distance; 0 iff images identical, symmetric."""
    v, _ = _proxy_grad(a, b, need_grad=False)
    return v


def _proxy_grad(a, b, need_grad=True):
    A = _as_channels(a, "proxy a")
    B = _as_channels(b, "proxy b")
    check_same_shape(A, B, "proxy inputs")

    blurs_a = _proxy_blurs(A)
    blurs_b = _proxy_blurs(B)
    bands_a = [A - blurs_a[0], blurs_a[0] - blurs_a[1], blurs_a[1] - blurs_a[2]]
    bands_b = [B - blurs_b[0], blurs_b[0] - blurs_b[1], blurs_b[1] - blurs_b[2]]

    gxa, gya = _diff_xy(A)
    gxb, gyb = _diff_xy(B)
    mag_a = np.sqrt(gxa**2 + gya**2 + 1e-12)
    mag_b = np.sqrt(gxb**2 + gyb**2 + 1e-12)

    value = 0.0
    for w, ba, bb in zip(_PROXY_BAND_WEIGHTS, bands_a, bands_b):
        value += w * float(np.abs(ba - bb).mean())
    value += _PROXY_GRAD_WEIGHT * float(np.abs(mag_a - mag_b).mean())

    if not need_grad:
        return value, None

    grad = np.zeros_like(B)
    n = B.size
    kernels = [_gauss_kernel(s, int(np.ceil(3 * s))) for s in _PROXY_SIGMAS]
    signs = [np.sign(bb - ba) * w / n for w, ba, bb in zip(_PROXY_BAND_WEIGHTS, bands_a, bands_b)]
    # band adjoints: (I - G1)^T s0 + (G1 - G2)^T s1 + (G2 - G3)^T s2
    grad += signs[0] - _filter_same(signs[0], kernels[0])
    grad += _filter_same(signs[1], kernels[0]) - _filter_same(signs[1], kernels[1])
    grad += _filter_same(signs[2], kernels[1]) - _filter_same(signs[2], kernels[2])

    sg = np.sign(mag_b - mag_a) * (_PROXY_GRAD_WEIGHT / n)
    rev = _DIFF_KERNEL[::-1]
    grad += correlate1d(sg * gxb / mag_b, rev, axis=1, mode="constant")
    grad += correlate1d(sg * gyb / mag_b, rev, axis=0, mode="constant")

    if np.asarray(b).ndim == 2:
        grad = grad[..., 0]
    return value, grad


# ---------------------------------------------------------------------------
# Composite objectives
# ---------------------------------------------------------------------------


@dataclass
class LossResult:
    total: float
    grad_rgb: np.ndarray        # d total / d rendered rgb
    grad_occupancy: np.ndarray  # d total / d rendered occupancy
    terms: dict = field(default_factory=dict)


def photometric_loss(image, mask, mask_hat, render: RenderOutput, w: LossWeights) -> LossResult:
    """Masked rgb L1 + mask L2 + (1 - SSIM) + perceptual proxy, with gradients."""
    img = as_array(image, (-1, -1, 3), "image")
    m = as_array(mask, img.shape[:2], "mask")
    m_hat = as_array(mask_hat, img.shape[:2], "mask_hat")
    if render.rgb.shape != img.shape:
        raise InvalidInput("render/image shape mismatch")

    grad_rgb = np.zeros_like(render.rgb)
    grad_occ = np.zeros_like(render.occupancy)
    terms = {}

    v_rgb, g = _l1_masked_grad(img, render.rgb, m)
    terms["rgb_l1"] = v_rgb
    grad_rgb += w.rgb * g

    v_mask, g = _l2_mask_grad(m_hat, render.occupancy)
    terms["mask_l2"] = v_mask
    grad_occ += w.mask * g

    mi = m[..., None] * img
    mr = m[..., None] * render.rgb
    if w.ssim > 0:
        s_val, g = _ssim_grad(mi, mr)
        terms["ssim"] = s_val
        grad_rgb += w.ssim * (-(g * m[..., None]))
    else:
        terms["ssim"] = 1.0
    if w.lpips > 0:
        p_val, g = _proxy_grad(mi, mr)
        terms["lpips_proxy"] = p_val
        grad_rgb += w.lpips * (g * m[..., None])
    else:
        terms["lpips_proxy"] = 0.0

    total = (w.rgb * terms["rgb_l1"] + w.mask * terms["mask_l2"]
             + w.ssim * (1.0 - terms["ssim"]) + w.lpips * terms["lpips_proxy"])
    return LossResult(float(total), grad_rgb, grad_occ, terms)


def refinement_loss(image, mask, mask_hat, inpainted_target, region, render: RenderOutput,
                    w: LossWeights) -> LossResult:
    """Refinement objective: adds the generated-region L1 and full-image proxy.

    `inpainted_target` is the generated image already multiplied by the
    region weights, so the generated term compares like with like.
    """
    img = as_array(image, (-1, -1, 3), "image")
    m = as_array(mask, img.shape[:2], "mask")
    m_hat = as_array(mask_hat, img.shape[:2], "mask_hat")
    R = as_array(region, img.shape[:2], "region")
    tgt = as_array(inpainted_target, img.shape, "inpainted_target")
    if R.min() < -1e-9 or R.max() > 1 + 1e-9:
        raise InvalidInput("region must lie in [0, 1]")

    grad_rgb = np.zeros_like(render.rgb)
    grad_occ = np.zeros_like(render.occupancy)
    terms = {}

    v_rgb, g = _l1_masked_grad(img, render.rgb, m)
    terms["rgb_l1"] = v_rgb
    grad_rgb += w.rgb * g

    v_mask, g = _l2_mask_grad(m_hat, render.occupancy)
    terms["mask_l2"] = v_mask
    grad_occ += w.mask * g

    masked_render = R[..., None] * render.rgb
    diff = masked_render - tgt
    terms["gen_l1"] = float(np.abs(diff).mean())
    grad_rgb += w.gen * np.sign(diff) * R[..., None] / diff.size

    if w.lpips > 0:
        p_val, g = _proxy_grad(img, render.rgb)
        terms["lpips_proxy"] = p_val
        grad_rgb += w.lpips * g
    else:
        terms["lpips_proxy"] = 0.0

    total = (w.rgb * terms["rgb_l1"] + w.mask * terms["mask_l2"]
             + w.gen * terms["gen_l1"] + w.lpips * terms["lpips_proxy"])
    return LossResult(float(total), grad_rgb, grad_occ, terms)


# ---------------------------------------------------------------------------
# Evaluation metrics
# ---------------------------------------------------------------------------


def eval_metrics(pred, gt, visible_mask=None) -> dict:
    """PSNR / SSIM / perceptual proxy; optionally restricted to visible pixels.

    With a mask: PSNR uses masked pixels only; SSIM averages windows fully
    inside the mask; the proxy runs on the mask's bounding-box crop with
    outside-mask pixels zeroed in both inputs. For a rectangular mask all
    three equal the plain metrics on the cropped images.
    """
    p = as_array(pred, (-1, -1, 3), "pred")
    g = as_array(gt, (-1, -1, 3), "gt")
    check_same_shape(p, g, "eval images")

    if visible_mask is None:
        mse = float(np.mean((p - g) ** 2))
        s = ssim(p, g)
        prox = perceptual_proxy(p, g)
    else:
        m = as_array(visible_mask, p.shape[:2], "visible_mask")
        if m.sum() == 0:
            return {"psnr": None, "ssim": None, "lpips_proxy": None, "valid": False}
        sel = m > 0.5
        mse = float(np.mean((p[sel] - g[sel]) ** 2))
        eroded = minimum_filter(m, size=_SSIM_WIN, mode="constant", cval=0.0) > 0.5
        if eroded.any():
            s, _ = _ssim_grad(p, g, need_grad=False, window_mask=eroded)
        else:
            s = None
        rows = np.flatnonzero(sel.any(axis=1))
        cols = np.flatnonzero(sel.any(axis=0))
        box = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
        pz = p[box] * sel[box][..., None]
        gz = g[box] * sel[box][..., None]
        prox = perceptual_proxy(pz, gz)

    psnr = 100.0 if mse < 1e-10 else float(10.0 * np.log10(1.0 / mse))
    return {"psnr": psnr, "ssim": s, "lpips_proxy": prox, "valid": True}


def metrics_report(rows: list[dict]) -> dict:
    """Per-frame metric rows plus an aggregate row (mean over valid frames)."""
    agg = {}
    for key in ("psnr", "ssim", "lpips_proxy"):
        vals = [r[key] for r in rows if r.get("valid", True) and r.get(key) is not None]
        agg[key] = float(np.mean(vals)) if vals else None
    return {"frames": rows, "aggregate": agg}


def write_metrics_json(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2))


def write_metrics_csv(report: dict, path) -> None:
    rows = report["frames"]
    cols = ["name", "psnr", "ssim", "lpips_proxy", "valid"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
        agg = dict(report["aggregate"])
        agg["name"] = "aggregate"
        agg["valid"] = True
        writer.writerow(agg)
