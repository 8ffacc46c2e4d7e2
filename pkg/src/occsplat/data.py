"""Synthetic articulated-body scenes with simulated occlusion.

Ground truth comes from self-rendering a known textured gaussian body, so
recovery is quantitatively checkable without external assets. The occlusion
protocol masks a centered box containing a target fraction of the body
pixels in a leading fraction of the frames.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .body import Skeleton, default_skeleton, template_point_cloud
from .errors import DataError, InvalidInput
from .fileio import (
    atomic_write_text,
    load_image_png,
    load_mask_png,
    save_image_png,
    save_mask_png,
)
from .pipeline import Frame, init_gaussians
from .body import Pose, skinning_transforms
from .splat import Camera, GaussianSet, pose_gaussians, render


@dataclass
class SceneSpec:
    frame_count: int = 50
    width: int = 128
    height: int = 128
    joint_count: int = 18
    seed: int = 0

    # motion
    motion_amplitude: float = 0.35
    turntable_turns: float = 1.0

    # cameras
    orbit_distance: float = 2.8
    center_height: float = 0.9
    eye_height: float = 1.1
    focal_factor: float = 1.4
    eval_azimuths_deg: tuple = (60.0, 120.0, 180.0, 240.0, 300.0)
    eval_frame_stride: int = 10

    # occlusion protocol
    occlusion_fraction_pixels: float = 0.5
    occlusion_fraction_frames: float = 0.8
    occluder_color: tuple = (0.32, 0.18, 0.12)

    background: tuple = (0.08, 0.10, 0.15)
    template_spacing: float = 0.048
    body_opacity: float = 0.985
    body_scale_factor: float = 0.6

    def __post_init__(self):
        if self.frame_count < 1:
            raise InvalidInput("frame_count must be >= 1")
        for name in ("occlusion_fraction_pixels", "occlusion_fraction_frames"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidInput(f"{name} must lie in [0, 1]")

    def to_json(self) -> dict:
        obj = asdict(self)
        for key in ("eval_azimuths_deg", "occluder_color", "background"):
            obj[key] = list(obj[key])
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        obj = dict(obj)
        for key in ("eval_azimuths_deg", "occluder_color", "background"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


@dataclass
class SceneData:
    spec: SceneSpec
    skeleton: Skeleton
    true_gaussians: GaussianSet
    frames: list[Frame]                 # occluded training observations
    gt_images: list[np.ndarray]         # unoccluded renders, train camera
    gt_silhouettes: list[np.ndarray]
    train_camera: Camera
    eval_cameras: list[Camera]
    novel: dict = field(default_factory=dict)  # (frame, cam) -> (image, silhouette)

    @property
    def background(self) -> np.ndarray:
        return np.asarray(self.spec.background, dtype=np.float64)

    def novel_items(self) -> list[tuple[int, int]]:
        return sorted(self.novel.keys())


# ---------------------------------------------------------------------------
# Scene construction
# ---------------------------------------------------------------------------

_PALETTE = np.array([
    [0.82, 0.45, 0.35], [0.35, 0.55, 0.80], [0.42, 0.72, 0.45], [0.78, 0.70, 0.38],
    [0.62, 0.45, 0.75], [0.45, 0.72, 0.72], [0.80, 0.52, 0.62], [0.55, 0.60, 0.42],
])


def _textured_body(skeleton: Skeleton, spec: SceneSpec) -> GaussianSet:
    pts, wts = template_point_cloud(skeleton, spec.template_spacing)
    gs = init_gaussians(skeleton, pts, wts, init_opacity=spec.body_opacity,
                        scale_factor=spec.body_scale_factor)
    rng = np.random.default_rng(spec.seed + 7919)
    dominant = np.argmax(gs.skin_weights, axis=1)
    base = _PALETTE[dominant % len(_PALETTE)]
    freq = rng.uniform(8.0, 14.0, 3)
    phase = rng.uniform(0, 2 * np.pi, 3)
    wave = 0.18 * np.sin(pts @ np.diag(freq) + phase)
    gs.colors[:, 0, :] = np.clip(base * (0.85 + wave), 0.05, 0.95)
    return gs


def _orbit_camera(azimuth_deg: float, spec: SceneSpec, name: str) -> Camera:
    a = np.deg2rad(azimuth_deg)
    center = np.array([0.0, spec.center_height, 0.0])
    eye = center + np.array([
        spec.orbit_distance * np.sin(a),
        spec.eye_height - spec.center_height,
        -spec.orbit_distance * np.cos(a),
    ])
    focal = spec.focal_factor * min(spec.width, spec.height)
    return Camera.look_at(eye, center, spec.width, spec.height, focal, name=name)


def _motion_poses(skeleton: Skeleton, spec: SceneSpec) -> list[Pose]:
    rng = np.random.default_rng(spec.seed + 104729)
    K = skeleton.joint_count
    amp = rng.uniform(0.3, 1.0, (K, 3)) * spec.motion_amplitude
    freq = rng.integers(1, 3, (K, 3)).astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi, (K, 3))
    # torso and head sway less than limbs
    for i, name in enumerate(skeleton.names):
        if name in ("pelvis", "spine", "chest", "neck", "head", "head_top"):
            amp[i] *= 0.25
    poses = []
    for f in range(spec.frame_count):
        t = f / max(spec.frame_count, 1)
        rot = amp * np.sin(2 * np.pi * freq * t + phase)
        yaw = 2 * np.pi * spec.turntable_turns * t
        bob = 0.02 * np.sin(2 * np.pi * t * 2.0)
        poses.append(Pose(rot, global_rotation=np.array([0.0, yaw, 0.0]),
                          global_translation=np.array([0.0, bob, 0.0])))
    return poses


def generate_scene(spec: SceneSpec) -> SceneData:
    """Deterministic synthetic scene: textured body, turntable motion,
    monocular training camera, held-out orbit cameras for evaluation."""
    skeleton = default_skeleton(spec.joint_count)
    body = _textured_body(skeleton, spec)
    train_cam = _orbit_camera(0.0, spec, "train")
    eval_cams = [_orbit_camera(a, spec, f"eval_{int(a):03d}") for a in spec.eval_azimuths_deg]
    poses = _motion_poses(skeleton, spec)

    frames, gt_images, gt_sils = [], [], []
    novel = {}
    for i, pose in enumerate(poses):
        posed = pose_gaussians(body, skinning_transforms(skeleton, pose))
        out = render(posed, train_cam, background=spec.background)
        sil = (out.occupancy > 0.5).astype(np.float64)
        gt_images.append(out.rgb)
        gt_sils.append(sil)
        frames.append(Frame(out.rgb.copy(), sil.copy(), pose, train_cam, index=i))
        if i % spec.eval_frame_stride == 0:
            for c, cam in enumerate(eval_cams):
                nout = render(posed, cam, background=spec.background)
                novel[(i, c)] = (nout.rgb, (nout.occupancy > 0.5).astype(np.float64))

    scene = SceneData(spec, skeleton, body, frames, gt_images, gt_sils,
                      train_cam, eval_cams, novel)
    if spec.occlusion_fraction_pixels > 0:
        simulate_occlusion(scene.frames, spec.occlusion_fraction_pixels,
                           spec.occlusion_fraction_frames, spec.occluder_color)
    return scene


# ---------------------------------------------------------------------------
# Occlusion protocol
# ---------------------------------------------------------------------------


def simulate_occlusion(frames: list[Frame], fraction_pixels: float = 0.5,
                       fraction_frames: float = 0.8, occluder_color=(0.32, 0.18, 0.12)) -> None:
    """Mask a centered box over the body in the leading fraction of frames.

    The box grows around the silhouette centroid (anisotropic Chebyshev
    rings scaled by the silhouette extents) until it holds exactly
    round(fraction * body pixels) body pixels; the final ring is truncated
    deterministically to hit the count, so the covered fraction is exact to
    within one pixel. Image pixels under the occluder take a flat color and
    the visibility mask is zeroed there.
    """
    if fraction_pixels >= 1.0:
        raise InvalidInput("fraction_pixels must be < 1")
    if fraction_pixels < 0 or not (0.0 <= fraction_frames <= 1.0):
        raise InvalidInput("occlusion fractions out of range")
    if fraction_pixels == 0.0:
        return
    color = np.asarray(occluder_color, dtype=np.float64)
    n_occluded = int(np.floor(len(frames) * fraction_frames + 1e-9))
    for frame in frames[:n_occluded]:
        human = frame.mask > 0.5
        total = int(human.sum())
        target = int(round(fraction_pixels * total))
        if target == 0:
            continue
        ys, xs = np.nonzero(human)
        cy, cx = ys.mean(), xs.mean()
        wy = max(np.abs(ys - cy).max(), 1.0)
        wx = max(np.abs(xs - cx).max(), 1.0)
        r = np.maximum(np.abs(xs - cx) / wx, np.abs(ys - cy) / wy)
        order = np.lexsort((xs, ys, r))
        chosen = order[:target]
        r_star = r[order[target - 1]]

        occluded = np.zeros_like(human)
        occluded[ys[chosen], xs[chosen]] = True
        yy, xx = np.mgrid[0: human.shape[0], 0: human.shape[1]]
        box = np.maximum(np.abs(xx - cx) / wx, np.abs(yy - cy) / wy) <= r_star
        paint = (box & ~human) | occluded

        frame.image[paint] = color
        frame.mask[occluded] = 0.0


# ---------------------------------------------------------------------------
# On-disk dataset
# ---------------------------------------------------------------------------


def save_dataset(scene: SceneData, root) -> Path:
    """Write the documented directory layout; every file is written atomically."""
    root = Path(root)
    for i, frame in enumerate(scene.frames):
        save_image_png(frame.image, root / "images" / f"{i:06d}.png")
        save_mask_png(frame.mask, root / "masks" / f"{i:06d}.png")
        atomic_write_text(root / "poses" / f"{i:06d}.json",
                          json.dumps(frame.pose.to_json(), indent=1))
        save_image_png(scene.gt_images[i], root / "gt" / "images" / f"{i:06d}.png")
        save_mask_png(scene.gt_silhouettes[i], root / "gt" / "masks" / f"{i:06d}.png")
    for (fi, ci), (img, sil) in sorted(scene.novel.items()):
        stem = f"f{fi:06d}_c{ci:02d}"
        save_image_png(img, root / "gt" / "novel" / f"{stem}.png")
        save_mask_png(sil, root / "gt" / "novel" / f"{stem}_mask.png")
    atomic_write_text(root / "cameras.json", json.dumps({
        "train": scene.train_camera.to_json(),
        "eval": [c.to_json() for c in scene.eval_cameras],
    }, indent=1))
    atomic_write_text(root / "scene.json", json.dumps({
        "spec": scene.spec.to_json(),
        "skeleton": scene.skeleton.to_json(),
        "novel_items": [list(k) for k in scene.novel_items()],
    }, indent=1))
    return root


@dataclass
class Dataset:
    root: Path
    frames: list[Frame]
    skeleton: Skeleton
    train_camera: Camera
    eval_cameras: list[Camera]
    spec: SceneSpec
    novel_items: list[tuple[int, int]]

    @property
    def background(self) -> np.ndarray:
        return np.asarray(self.spec.background, dtype=np.float64)

    def gt_novel_paths(self, fi: int, ci: int) -> tuple[Path, Path]:
        stem = f"f{fi:06d}_c{ci:02d}"
        return (self.root / "gt" / "novel" / f"{stem}.png",
                self.root / "gt" / "novel" / f"{stem}_mask.png")


def load_dataset(root) -> Dataset:
    root = Path(root)
    try:
        scene_obj = json.loads((root / "scene.json").read_text())
        cam_obj = json.loads((root / "cameras.json").read_text())
    except OSError as exc:
        raise DataError(f"dataset at {root} is missing metadata: {exc}") from exc
    spec = SceneSpec.from_json(scene_obj["spec"])
    skeleton = Skeleton.from_json(scene_obj["skeleton"])
    train_cam = Camera.from_json(cam_obj["train"])
    eval_cams = [Camera.from_json(c) for c in cam_obj["eval"]]

    frames = []
    for i in range(spec.frame_count):
        img_path = root / "images" / f"{i:06d}.png"
        mask_path = root / "masks" / f"{i:06d}.png"
        pose_path = root / "poses" / f"{i:06d}.json"
        for p in (img_path, mask_path, pose_path):
            if not p.exists():
                raise DataError(f"frame {i}: missing file {p}")
        frames.append(Frame(
            load_image_png(img_path), load_mask_png(mask_path),
            Pose.from_json(json.loads(pose_path.read_text())), train_cam, index=i))
    novel = [tuple(k) for k in scene_obj.get("novel_items", [])]
    return Dataset(root, frames, skeleton, train_cam, eval_cams, spec, novel)
