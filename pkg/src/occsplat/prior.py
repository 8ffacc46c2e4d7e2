"""Pluggable generative prior: noising schedule, SDS gradients, and the
three generation calls (RGB inpainting, person segmentation, in-context
inpainting).

Backends implement four operations (inpaint / segment / denoise / health).
The deterministic mock backend is a first-class citizen: it is the
acceptance-test instrument, with three documented modes:

- ``oracle``: the denoiser returns the injected noise exactly, so SDS
  gradients are identically zero;
- ``offset``: the denoiser returns noise plus a constant, so SDS gradients
  are a known constant field;
- ``silhouette``: the denoiser behaves as a perfect denoiser that believes
  the clean image is a joint-conditioned body silhouette, pulling occupancy
  toward that template.

Noise is derived from the per-call seed (not transmitted), so a remote
backend reconstructs the identical epsilon; see `derive_noise_sample`.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .body import Skeleton, bone_radius_ratios, default_skeleton
from .errors import InvalidInput, ProtocolError, TransportError
from . import protocol
from .validation import as_array, check_map

DEFAULT_POSITIVE_PROMPT = (
    "clean background, high contrast to background, a person only, plain clothes, "
    "simple clothes, natural body, natural limbs, no texts, no overlay"
)
DEFAULT_NEGATIVE_PROMPT = (
    "multiple objects, occlusions, complex pattern, fancy clothes, longbody, lowres, "
    "bad anatomy, bad hands, bad feet, missing fingers, cropped, worst quality, "
    "low quality, blurry"
)

_IN_CONTEXT_GAP = 8  # blank rows between the stacked reference and target halves


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


@dataclass
class DiffusionSchedule:
    """Linear-ramp DDPM forward schedule with an SDS sampling window."""

    total_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    t_min: float = 0.02   # fraction of total_steps
    t_max: float = 0.98
    weight_mode: str = "constant"  # or "one_minus_alpha_bar"

    def __post_init__(self):
        if self.total_steps < 2:
            raise InvalidInput("schedule: total_steps must be >= 2")
        if not (0 < self.beta_start < self.beta_end < 1):
            raise InvalidInput("schedule: need 0 < beta_start < beta_end < 1")
        if not (0 <= self.t_min < self.t_max <= 1):
            raise InvalidInput("schedule: need 0 <= t_min < t_max <= 1")
        if self.weight_mode not in ("constant", "one_minus_alpha_bar"):
            raise InvalidInput(f"schedule: unknown weight mode {self.weight_mode!r}")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.total_steps)
        self.alpha_bars = np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])

    def weight(self, t: int) -> float:
        if self.weight_mode == "constant":
            return 1.0
        return 1.0 - self.alpha_bar(t)

    def sample_bounds(self) -> tuple[int, int]:
        """Half-open [lo, hi) index range for SDS timestep sampling."""
        lo = int(round(self.t_min * self.total_steps))
        hi = int(round(self.t_max * self.total_steps))
        return max(lo, 0), min(max(hi, lo + 1), self.total_steps)

    def to_json(self) -> dict:
        return {
            "total_steps": self.total_steps, "beta_start": self.beta_start,
            "beta_end": self.beta_end, "t_min": self.t_min, "t_max": self.t_max,
            "weight_mode": self.weight_mode,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DiffusionSchedule":
        return cls(**obj)


def derive_noise_sample(schedule: DiffusionSchedule, shape: tuple, seed: int):
    """Deterministic (t, epsilon) for a call seed; shared with remote backends.

    The stream is fixed: one integer draw for t in the schedule's window,
    then float32 standard normals of the requested shape.
    """
    rng = np.random.default_rng(int(seed))
    lo, hi = schedule.sample_bounds()
    t = int(rng.integers(lo, hi))
    eps = rng.standard_normal(shape, dtype=np.float32)
    return t, eps


def sample_sds_inputs(schedule: DiffusionSchedule, x0, rng) -> dict:
    """Draw (t, eps) and form the noised input x_t = sqrt(ab)x0 + sqrt(1-ab)eps.

    `rng` is either a numpy Generator (a call seed is drawn from it) or an
    integer seed. x0 may be single-channel; it is replicated to 3 channels
    because the prior expects image-shaped inputs. All noise math runs in
    float32 to match the wire encoding exactly.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 2:
        x0 = np.repeat(x0[:, :, None], 3, axis=2)
    if x0.min() < -1e-9 or x0.max() > 1 + 1e-9:
        raise InvalidInput("x0 must lie in [0, 1]")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else int(rng.integers(0, 2**31 - 1))
    t, eps = derive_noise_sample(schedule, x0.shape, seed)
    ab = schedule.alpha_bar(t)
    x_t = (np.float32(np.sqrt(ab)) * x0.astype(np.float32)
           + np.float32(np.sqrt(1.0 - ab)) * eps)
    return {"t": t, "eps": eps, "x_t": x_t, "seed": seed}


# ---------------------------------------------------------------------------
# Pose conditioning
# ---------------------------------------------------------------------------


@dataclass
class PoseCondition:
    """2D joints with visibility flags, plus opaque prompt strings."""

    joints2d: np.ndarray                    # (K, 2) pixels
    visible: np.ndarray                     # (K,) bool
    positive_prompt: str = ""
    negative_prompt: str = ""

    def __post_init__(self):
        self.joints2d = as_array(self.joints2d, (-1, 2), "joints2d")
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.visible.shape[0] != self.joints2d.shape[0]:
            raise InvalidInput("pose condition: joints/visibility length mismatch")

    def shifted(self, dy: float) -> "PoseCondition":
        j = self.joints2d.copy()
        j[:, 1] += dy
        return PoseCondition(j, self.visible.copy(), self.positive_prompt, self.negative_prompt)


def render_joint_silhouette(joints2d, visible, skeleton: Skeleton, height: int, width: int,
                            widen: float = 1.0, edge_pad_px: float = 0.0) -> np.ndarray:
    """Rasterize a capsule body silhouette from conditioned 2D joints.

    Each visible joint draws a capsule to its nearest visible ancestor; the
    capsule radius is the bone's radius/length ratio times the projected
    segment length (scaled by the skipped chain length when intermediate
    joints are hidden). This keeps all visible joints connected to the torso
    component whenever the torso itself is visible.
    """
    joints2d = as_array(joints2d, (-1, 2), "joints2d")
    visible = np.asarray(visible, dtype=bool)
    ratios = bone_radius_ratios(skeleton)
    rest = skeleton.rest_joint_positions()
    out = np.zeros((height, width))
    yy, xx = np.mgrid[0:height, 0:width]
    centers = np.stack([xx + 0.5, yy + 0.5], axis=-1)

    # global pixels-per-meter estimate: keeps foreshortened bones from
    # collapsing to zero thickness
    vis_pts = joints2d[visible]
    if vis_pts.shape[0] >= 2:
        d2 = vis_pts[:, None, :] - vis_pts[None, :, :]
        extent2d = np.sqrt((d2**2).sum(-1)).max()
        rest_vis = rest[visible]
        d3 = rest_vis[:, None, :] - rest_vis[None, :, :]
        extent3d = max(np.sqrt((d3**2).sum(-1)).max(), 1e-6)
        px_per_m = extent2d / extent3d
    else:
        px_per_m = 0.0

    def draw_capsule(p, q, r):
        if r <= 0:
            return
        x0 = max(int(np.floor(min(p[0], q[0]) - r - 1)), 0)
        x1 = min(int(np.ceil(max(p[0], q[0]) + r + 1)), width)
        y0 = max(int(np.floor(min(p[1], q[1]) - r - 1)), 0)
        y1 = min(int(np.ceil(max(p[1], q[1]) + r + 1)), height)
        if x0 >= x1 or y0 >= y1:
            return
        c = centers[y0:y1, x0:x1]
        d = q - p
        denom = float(d @ d)
        if denom < 1e-12:
            dist = np.linalg.norm(c - p, axis=-1)
        else:
            s = np.clip(((c - p) @ d) / denom, 0.0, 1.0)
            proj = p + s[..., None] * d
            dist = np.linalg.norm(c - proj, axis=-1)
        out[y0:y1, x0:x1] = np.maximum(out[y0:y1, x0:x1], (dist <= r).astype(np.float64))

    for k in range(skeleton.joint_count):
        if not visible[k]:
            continue
        a = skeleton.parents[k]
        chain3d = 0.0
        bone3d = np.linalg.norm(rest[k] - rest[skeleton.parents[k]]) if skeleton.parents[k] >= 0 else 0.0
        node = k
        while a >= 0 and not visible[a]:
            chain3d += np.linalg.norm(rest[node] - rest[a])
            node = a
            a = skeleton.parents[a]
        if a < 0:
            continue
        chain3d += np.linalg.norm(rest[node] - rest[a])
        seg2d = np.linalg.norm(joints2d[k] - joints2d[a])
        scale = bone3d / chain3d if chain3d > 1e-9 else 1.0
        r_proj = ratios.get(k, 0.15) * seg2d * scale
        r_iso = ratios.get(k, 0.15) * bone3d * px_per_m
        r = max(r_proj, 0.85 * r_iso) * widen + edge_pad_px
        draw_capsule(joints2d[a], joints2d[k], r)
    return out


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class PriorBackend:
    """Interface every prior backend implements."""

    kind = "abstract"

    def inpaint(self, image, mask, cond: PoseCondition, steps: int,
                conditioning_scale: float, seed: int) -> np.ndarray:
        raise NotImplementedError

    def segment(self, image, cond: PoseCondition, seed: int) -> np.ndarray:
        raise NotImplementedError

    def denoise(self, x_t, t: int, cond: PoseCondition, seed: int) -> np.ndarray:
        raise NotImplementedError

    def health(self) -> dict:
        raise NotImplementedError


class MockPriorBackend(PriorBackend):
    """Deterministic in-process prior; see module docstring for the modes.

    Image inputs and outputs are snapped to the 8-bit grid so that running
    against a remote mirror of this mock (which receives PNGs) produces
    byte-identical results.
    """

    MODES = ("oracle", "offset", "silhouette")

    def __init__(self, mode: str = "silhouette", skeleton: Skeleton | None = None,
                 schedule: DiffusionSchedule | None = None, offset_delta: float = 0.1,
                 widen: float = 1.05, edge_pad_ratio: float = 0.03,
                 body_color=(0.55, 0.45, 0.40)):
        if mode not in self.MODES:
            raise InvalidInput(f"unknown mock mode {mode!r}; pick one of {self.MODES}")
        self.mode = mode
        self.skeleton = skeleton if skeleton is not None else default_skeleton()
        self.schedule = schedule if schedule is not None else DiffusionSchedule()
        self.offset_delta = float(offset_delta)
        self.widen = float(widen)
        self.edge_pad_ratio = float(edge_pad_ratio)  # pad = ratio x projected body extent
        self.body_color = np.asarray(body_color, dtype=np.float64)
        self.last_request: dict | None = None
        self._lock = threading.Lock()

    @property
    def kind(self) -> str:
        return f"mock:{self.mode}"

    def _record(self, **kw):
        with self._lock:
            self.last_request = kw

    def _silhouette(self, cond: PoseCondition, height: int, width: int,
                    widen: float | None = None) -> np.ndarray:
        pts = cond.joints2d[cond.visible]
        pad = 0.0
        if pts.shape[0] >= 2:
            d = pts[:, None, :] - pts[None, :, :]
            pad = self.edge_pad_ratio * float(np.sqrt((d**2).sum(-1)).max())
        return render_joint_silhouette(
            cond.joints2d, cond.visible, self.skeleton, height, width,
            widen=self.widen if widen is None else widen,
            edge_pad_px=pad,
        )

    def inpaint(self, image, mask, cond, steps, conditioning_scale, seed):
        img = protocol.quantize_image(as_array(image, (-1, -1, 3), "image"))
        m = check_map(mask, "mask") > 0.5
        H, W = m.shape
        self._record(op="inpaint", height=H, width=W, steps=steps,
                     conditioning_scale=conditioning_scale, seed=seed,
                     masked=int(m.sum()))
        out = img.copy()
        if not m.any():
            return out
        # Stacked-canvas rule: a mask confined to the bottom half with a clean
        # top half is treated as an in-context request; masked pixels copy
        # from the reference half one (H + gap)/... offset above. Otherwise the
        # masked region is filled with the joint-conditioned template body
        # over a grey background.
        half = (H - _IN_CONTEXT_GAP) // 2
        is_stacked = (H > 2 * _IN_CONTEXT_GAP and (H - _IN_CONTEXT_GAP) % 2 == 0
                      and not m[: half + _IN_CONTEXT_GAP].any() and m[half + _IN_CONTEXT_GAP:].any())
        if is_stacked:
            offset = half + _IN_CONTEXT_GAP
            rows, cols = np.nonzero(m)
            src = rows - offset
            ok = src >= 0
            out[rows[ok], cols[ok]] = img[src[ok], cols[ok]]
            return out
        sil = self._silhouette(cond, H, W) > 0.5
        fill = np.where(sil[..., None], self.body_color, 0.5)
        out[m] = protocol.quantize_image(fill)[m]
        return out

    def segment(self, image, cond, seed):
        img = as_array(image, (-1, -1, 3), "image")
        H, W = img.shape[:2]
        if not cond.visible.any():
            raise InvalidInput("segmentation requires at least one visible joint")
        self._record(op="segment", height=H, width=W, seed=seed)
        return (self._silhouette(cond, H, W, widen=1.0) >= 0.5).astype(np.float64)

    def denoise(self, x_t, t, cond, seed):
        x_t = np.asarray(x_t, dtype=np.float32)
        self._record(op="denoise", t=int(t), seed=int(seed), shape=list(x_t.shape))
        t2, eps = derive_noise_sample(self.schedule, x_t.shape, seed)
        if self.mode == "oracle":
            return eps.copy()
        if self.mode == "offset":
            return eps + np.float32(self.offset_delta)
        ab = np.float32(self.schedule.alpha_bar(t))
        sq, sq1 = np.sqrt(ab), np.sqrt(np.float32(1.0) - ab)
        x0 = (x_t - sq1 * eps) / sq
        target = self._silhouette(cond, x_t.shape[0], x_t.shape[1], widen=self.widen)
        target3 = np.repeat(target[:, :, None], 3, axis=2).astype(np.float32)
        return eps + (sq / sq1) * (x0 - target3)

    def health(self):
        return {"status": "ok", "backend_kind": self.kind, "version": protocol.PROTOCOL_VERSION}


class RemotePriorBackend(PriorBackend):
    """HTTP client for the generative-prior service; see `protocol`."""

    kind = "remote"

    def __init__(self, base_url: str, timeout: float = 60.0, max_retries: int = 3,
                 backoff: float = 0.25):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        import requests

        self._session = requests.Session()
        self._requests = requests

    def _post(self, path: str, payload: dict) -> dict:
        url = f"{self.base_url}{path}"
        last_exc = None
        for attempt in range(self.max_retries):
            try:
                resp = self._session.post(url, json=payload, timeout=self.timeout)
            except self._requests.RequestException as exc:
                last_exc = exc
                time.sleep(self.backoff * 2**attempt)
                continue
            if resp.status_code >= 500:
                last_exc = TransportError(f"{url} -> {resp.status_code}")
                time.sleep(self.backoff * 2**attempt)
                continue
            if resp.status_code != 200:
                raise ProtocolError(f"{url} -> {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{url}: response is not JSON") from exc
        raise TransportError(f"{url}: unreachable after {self.max_retries} attempts ({last_exc})")

    def inpaint(self, image, mask, cond, steps, conditioning_scale, seed):
        payload = {
            "image": protocol.encode_image(image),
            "mask": protocol.encode_mask(mask),
            "joints2d": protocol.encode_joints(cond.joints2d, cond.visible),
            "prompts": {"positive": cond.positive_prompt, "negative": cond.negative_prompt},
            "steps": int(steps),
            "conditioning_scale": float(conditioning_scale),
            "seed": int(seed),
        }
        return protocol.decode_image(self._post("/v1/inpaint", payload).get("image"))

    def segment(self, image, cond, seed):
        payload = {
            "image": protocol.encode_image(image),
            "joints2d": protocol.encode_joints(cond.joints2d, cond.visible),
            "seed": int(seed),
        }
        return protocol.decode_mask(self._post("/v1/segment", payload).get("mask"))

    def denoise(self, x_t, t, cond, seed):
        payload = {
            "x_t": protocol.encode_blob(x_t),
            "t": int(t),
            "joints2d": protocol.encode_joints(cond.joints2d, cond.visible),
            "seed": int(seed),
        }
        out = protocol.decode_blob(self._post("/v1/denoise", payload).get("epsilon_hat"))
        if out.shape != tuple(np.asarray(x_t).shape):
            raise ProtocolError(f"epsilon_hat shape {out.shape} != x_t shape {np.asarray(x_t).shape}")
        return out

    def health(self):
        url = f"{self.base_url}/v1/health"
        try:
            resp = self._session.get(url, timeout=self.timeout)
        except self._requests.RequestException as exc:
            raise TransportError(f"{url}: {exc}") from exc
        if resp.status_code != 200:
            raise ProtocolError(f"{url} -> {resp.status_code}")
        return resp.json()


def make_backend(spec: str, skeleton: Skeleton | None = None,
                 schedule: DiffusionSchedule | None = None, **mock_kwargs) -> PriorBackend:
    """Build a backend from a CLI-style spec: ``mock:<mode>`` or ``remote:<url>``.

    For ``remote`` with no URL, the OCCSPLAT_BACKEND_URL environment variable
    is consulted.
    """
    if spec.startswith("mock:"):
        return MockPriorBackend(spec.split(":", 1)[1], skeleton=skeleton,
                                schedule=schedule, **mock_kwargs)
    if spec == "mock":
        return MockPriorBackend(skeleton=skeleton, schedule=schedule, **mock_kwargs)
    if spec.startswith("remote"):
        url = spec.split(":", 1)[1] if ":" in spec else ""
        if not url:
            import os

            url = os.environ.get("OCCSPLAT_BACKEND_URL", "")
        if not url:
            raise InvalidInput("remote backend needs a URL (remote:<url> or OCCSPLAT_BACKEND_URL)")
        return RemotePriorBackend(url)
    raise InvalidInput(f"unknown backend spec {spec!r}")


# ---------------------------------------------------------------------------
# Generation calls
# ---------------------------------------------------------------------------


def sds_grad(occupancy, cond: PoseCondition, schedule: DiffusionSchedule,
             backend: PriorBackend, rng) -> np.ndarray:
    """Score-distillation gradient on an occupancy map.

    Returns w(t) * (eps_hat - eps) averaged over the replicated channels; this
    is the upstream gradient fed to the rasterizer's backward pass.
    """
    A = check_map(occupancy, "occupancy")
    if A.min() < -1e-9 or A.max() > 1 + 1e-9:
        raise InvalidInput("occupancy must lie in [0, 1]")
    smp = sample_sds_inputs(schedule, A, rng)
    eps_hat = backend.denoise(smp["x_t"], smp["t"], cond, smp["seed"])
    diff = eps_hat.astype(np.float64) - smp["eps"].astype(np.float64)
    return schedule.weight(smp["t"]) * diff.mean(axis=2)


def inpaint_rgb(image, region, cond: PoseCondition, backend: PriorBackend,
                steps: int = 10, conditioning_scale: float = 1.0, seed: int = 0) -> np.ndarray:
    """Inpaint `region` of `image`; pixels outside the region pass through bit-exactly."""
    img = as_array(image, (-1, -1, 3), "image")
    m = check_map(region, "region") > 0.5
    if not m.any():
        return img.copy()
    out = backend.inpaint(img, m.astype(np.float64), cond, steps, conditioning_scale, seed)
    result = img.copy()
    result[m] = out[m]
    return result


def segment_person(image, cond: PoseCondition, backend: PriorBackend, seed: int = 0) -> np.ndarray:
    """Binary person mask for an image, conditioned on visible 2D joints."""
    img = as_array(image, (-1, -1, 3), "image")
    if not np.asarray(cond.visible).any():
        raise InvalidInput("segmentation requires at least one visible joint")
    mask = backend.segment(img, cond, seed)
    mask = check_map(mask, "segmentation result")
    if not np.all((mask == 0) | (mask == 1)):
        raise ProtocolError("segmentation backend returned non-binary mask")
    return mask


def in_context_inpaint(coarse, observed, region, cond: PoseCondition,
                       backend: PriorBackend, steps: int = 10,
                       conditioning_scale: float = 0.3, seed: int = 0,
                       support_threshold: float = 1e-3) -> np.ndarray:
    """Inpaint occluded regions of `observed` with `coarse` stacked as reference.

    Builds a single canvas [coarse; gap; observed], requests inpainting of the
    region's copy inside the observed half, and returns the observed image
    with generated content inside the region's support (outside pixels are
    returned untouched).
    """
    ref = as_array(coarse, (-1, -1, 3), "coarse")
    img = as_array(observed, ref.shape, "observed")
    R = check_map(region, "region")
    if R.shape != img.shape[:2]:
        raise InvalidInput("region/observed shape mismatch")
    H, W = R.shape
    support = R > support_threshold
    if not support.any():
        return img.copy()

    gap = np.full((_IN_CONTEXT_GAP, W, 3), 0.5)
    canvas = np.concatenate([ref, gap, img], axis=0)
    canvas_mask = np.zeros((canvas.shape[0], W))
    canvas_mask[H + _IN_CONTEXT_GAP:] = support
    cond2 = cond.shifted(H + _IN_CONTEXT_GAP)

    out = backend.inpaint(canvas, canvas_mask, cond2, steps, conditioning_scale, seed)
    bottom = out[H + _IN_CONTEXT_GAP:]
    result = img.copy()
    result[support] = bottom[support]
    return result
