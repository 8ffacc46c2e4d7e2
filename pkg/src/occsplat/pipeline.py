"""Three-stage reconstruction pipeline.

Stage 0 (init) recovers complete person masks from partial visibility by
inpainting the non-person region and re-segmenting. Stage 1 (optimize)
fits gaussians to visible pixels with score-distillation regularization of
the occupancy map in both posed and canonical space. Stage 2 (refine)
finetunes against in-context inpainted targets with density control active
for a leading window of steps.
"""

from __future__ import annotations

import datetime
import hashlib
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .body import (
    Pose,
    Skeleton,
    assign_skin_weights,
    canonical_da_pose,
    filter_self_occluded_joints,
    forward_kinematics,
    skinning_transforms,
)
from .config import TrainingConfig
from .density import densify_and_prune, merge_kl, scene_extent
from .errors import InvalidInput, InvalidState, ProtocolError, TransportError
from .fileio import (
    JsonlLogger,
    save_gaussians,
    save_image_png,
    save_mask_png,
    save_occupancy_png,
)
from .losses import photometric_loss, refinement_loss
from .optim import AdamOptimizer
from .prior import (
    DiffusionSchedule,
    PoseCondition,
    PriorBackend,
    in_context_inpaint,
    inpaint_rgb,
    sds_grad,
    segment_person,
)
from .splat import (
    Camera,
    GaussianSet,
    RasterSettings,
    RenderOutput,
    inverse_sigmoid,
    pose_backward,
    pose_gaussians,
    render,
    render_backward,
)

# tighter rasterization bounds for training: identical math, smaller splats
# tails (the oracle-exact defaults stay on RasterSettings())
TRAIN_RASTER = RasterSettings(cutoff_sigma=4.0, alpha_min=1e-4)
from .validation import check_image, check_mask, check_same_shape


@dataclass
class Frame:
    """One training observation: image, visibility mask, pose, camera."""

    image: np.ndarray
    mask: np.ndarray
    pose: Pose
    camera: Camera
    index: int = 0

    def __post_init__(self):
        self.image = check_image(self.image, f"frame {self.index} image")
        self.mask = check_mask(self.mask, f"frame {self.index} mask")
        check_same_shape(self.image[..., 0], self.mask, f"frame {self.index}")


@dataclass
class StageArtifacts:
    """In-memory products of the stages, in frame order."""

    masks: list = field(default_factory=list)            # completed masks M-hat
    coarse: list = field(default_factory=list)           # stage-1 RenderOutputs
    regions: list = field(default_factory=list)          # inpaint regions R
    inpaint_targets: list = field(default_factory=list)  # region-weighted targets
    init_fallbacks: int = 0
    refine_inpaint_failures: int = 0


# ---------------------------------------------------------------------------
# Initialization helpers
# ---------------------------------------------------------------------------


def init_gaussians(skeleton: Skeleton, template_points, template_weights,
                   init_opacity: float = 0.1, scale_factor: float = 1.0,
                   sh_degree: int = 0) -> GaussianSet:
    """One gaussian per template point; scales from mean 4-NN spacing."""
    pts = np.asarray(template_points, dtype=np.float64)
    if pts.size == 0:
        raise InvalidInput("template point cloud is empty")
    k = min(5, pts.shape[0])
    dist, _ = cKDTree(pts).query(pts, k=k)
    nn = dist[:, 1:].mean(axis=1) if k > 1 else np.full(pts.shape[0], 0.1)
    scales = np.clip(nn * scale_factor, 1e-4, None)
    n = pts.shape[0]
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    coeffs = 1 if sh_degree == 0 else 4
    colors = np.zeros((n, coeffs, 3))
    colors[:, 0, :] = 0.5
    weights = assign_skin_weights(pts, pts, template_weights)
    return GaussianSet(
        positions=pts.copy(),
        rotations=rot,
        log_scales=np.log(np.repeat(scales[:, None], 3, axis=1)),
        opacity_logits=np.full(n, inverse_sigmoid(init_opacity)),
        colors=colors,
        skin_weights=weights,
    )


def render_template_depth(skeleton: Skeleton, pose: Pose, camera: Camera,
                          gaussians: GaussianSet | None = None):
    """Depth of the (posed) template surface plus posed 3D joints."""
    if gaussians is None:
        from .body import template_point_cloud

        pts, w = template_point_cloud(skeleton)
        gaussians = init_gaussians(skeleton, pts, w, init_opacity=0.9)
    tf = skinning_transforms(skeleton, pose)
    posed = pose_gaussians(gaussians, tf)
    out = render(posed, camera, settings=TRAIN_RASTER)
    joints = forward_kinematics(skeleton, pose).translations
    return out.depth, joints


def project_joints(joints3d: np.ndarray, camera: Camera) -> np.ndarray:
    cam = joints3d @ camera.rotation.T + camera.translation
    z = np.where(np.abs(cam[:, 2]) < 1e-9, 1e-9, cam[:, 2])
    u = camera.fx * cam[:, 0] / z + camera.cx
    v = camera.fy * cam[:, 1] / z + camera.cy
    return np.stack([u, v], axis=1)


def build_pose_condition(skeleton: Skeleton, pose: Pose, camera: Camera,
                         depth: np.ndarray, sigma: float,
                         positive_prompt: str = "", negative_prompt: str = "") -> PoseCondition:
    joints = forward_kinematics(skeleton, pose).translations
    visible = filter_self_occluded_joints(joints, depth, camera, sigma)
    return PoseCondition(project_joints(joints, camera), visible,
                         positive_prompt, negative_prompt)


def compute_region(mask, occupancy) -> np.ndarray:
    """Occluded body region: (1 - M) * A."""
    m = np.asarray(mask, dtype=np.float64)
    a = np.asarray(occupancy, dtype=np.float64)
    check_same_shape(m, a, "region inputs")
    return (1.0 - m) * a


def _frame_seed(base_seed: int, tag: int, index: int) -> int:
    h = hashlib.sha256(f"{base_seed}:{tag}:{index}".encode()).digest()
    return int.from_bytes(h[:4], "little") % (2**31 - 1)


# ---------------------------------------------------------------------------
# Stage 0: mask completion
# ---------------------------------------------------------------------------


def stage_init(frames: list[Frame], skeleton: Skeleton, backend: PriorBackend,
               config: TrainingConfig, template_gaussians: GaussianSet,
               log: JsonlLogger | None = None) -> StageArtifacts:
    """Recover complete masks per frame; falls back to the observed mask on
    backend failure (counted, never fatal)."""
    art = StageArtifacts()
    sigma = config.sigma_z if config.sigma_z is not None else 1.5 * skeleton.mean_bone_length()
    for frame in frames:
        depth, _ = render_template_depth(skeleton, frame.pose, frame.camera, template_gaussians)
        cond = build_pose_condition(skeleton, frame.pose, frame.camera, depth, sigma,
                                    config.positive_prompt, config.negative_prompt)
        seed = _frame_seed(config.seed, 0, frame.index)
        region = 1.0 - frame.mask
        try:
            inpainted = inpaint_rgb(frame.image, region, cond, backend,
                                    steps=config.inpaint_steps,
                                    conditioning_scale=config.init_conditioning_scale,
                                    seed=seed)
            m_hat = segment_person(inpainted, cond, backend, seed=seed)
        except (TransportError, ProtocolError) as exc:
            art.init_fallbacks += 1
            m_hat = frame.mask.copy()
            if log:
                log.write({"type": "warning", "stage": "init", "frame": frame.index,
                           "error": str(exc)})
        # never erase observed evidence
        art.masks.append(np.maximum(m_hat, frame.mask))
        if log:
            log.write({"type": "init_frame", "frame": frame.index,
                       "mask_pixels": int(art.masks[-1].sum()),
                       "observed_pixels": int(frame.mask.sum())})
    return art


# ---------------------------------------------------------------------------
# Stage 1/2 shared machinery
# ---------------------------------------------------------------------------


@dataclass
class TrainContext:
    frames: list[Frame]
    masks: list[np.ndarray]
    skeleton: Skeleton
    config: TrainingConfig
    backend: PriorBackend
    background: np.ndarray
    canonical_camera: Camera
    sigma: float
    raster: RasterSettings = field(default_factory=lambda: TRAIN_RASTER)
    transforms_cache: dict = field(default_factory=dict)

    def frame_transforms(self, idx: int):
        if idx not in self.transforms_cache:
            self.transforms_cache[idx] = skinning_transforms(self.skeleton, self.frames[idx].pose)
        return self.transforms_cache[idx]


def make_context(frames, masks, skeleton, config, backend, background=(0, 0, 0)) -> TrainContext:
    H, W = frames[0].image.shape[:2] if frames else (128, 128)
    focal = config.canonical_focal_factor * min(H, W)
    cam = Camera.look_at(
        (0.0, config.canonical_height, -config.canonical_distance),
        (0.0, config.canonical_height, 0.0), W, H, focal, name="canonical")
    sigma = config.sigma_z if config.sigma_z is not None else 1.5 * skeleton.mean_bone_length()
    return TrainContext(list(frames), list(masks), skeleton, config, backend,
                        np.asarray(background, dtype=np.float64), cam, sigma)


def draw_step_kind(rng: np.random.Generator, rho_posed: float, n_frames: int,
                   n_angles: int) -> tuple[bool, int]:
    """The per-step stochastic choice: posed frame vs canonical view angle."""
    posed = bool(rng.random() < rho_posed)
    if posed:
        return True, int(rng.integers(n_frames))
    return False, int(rng.integers(n_angles))


def canonical_view_pose(skeleton: Skeleton, angle_index: int, n_angles: int) -> Pose:
    base = canonical_da_pose(skeleton)
    yaw = angle_index * (2.0 * np.pi / n_angles)
    return Pose(base.rotations, global_rotation=np.array([0.0, yaw, 0.0]))


def optimize_step(gaussians: GaussianSet, ctx: TrainContext, rng: np.random.Generator,
                  optimizer: AdamOptimizer, lr_scales: dict | None = None) -> dict:
    """One stage-1 update; returns the step record (with gradient stats)."""
    cfg = ctx.config
    w = cfg.optimize_weights
    posed, idx = draw_step_kind(rng, cfg.rho_posed, len(ctx.frames), cfg.canonical_angles)

    if posed:
        frame = ctx.frames[idx]
        tf = ctx.frame_transforms(idx)
        camera = frame.camera
    else:
        pose = canonical_view_pose(ctx.skeleton, idx, cfg.canonical_angles)
        tf = skinning_transforms(ctx.skeleton, pose)
        camera = ctx.canonical_camera

    posed_gs, pose_ctx = pose_gaussians(gaussians, tf, return_context=True)
    out, internals = render(posed_gs, camera, background=ctx.background,
                            settings=ctx.raster, return_internals=True)
    npix = out.occupancy.size

    sds_weight = w.pose if posed else w.can

    def sds_image():
        # zero-weight runs (e.g. the visible-pixels-only baseline) skip the
        # backend call entirely
        if sds_weight == 0:
            return np.zeros_like(out.occupancy)
        cond = build_pose_condition(ctx.skeleton,
                                    frame.pose if posed else pose, camera,
                                    out.depth, ctx.sigma, "", cfg.negative_prompt)
        return sds_grad(out.occupancy, cond, cfg.schedule, ctx.backend, rng)

    if posed:
        res = photometric_loss(frame.image, frame.mask, ctx.masks[idx], out, w)
        sds = sds_image()
        grad_rgb = res.grad_rgb
        grad_occ = res.grad_occupancy + w.pose * sds / npix
        record = {"rho": 1, "frame": idx, "loss": res.total, **res.terms}
    else:
        sds = sds_image()
        grad_rgb = np.zeros_like(out.rgb)
        grad_occ = w.can * sds / npix
        record = {"rho": 0, "angle_index": idx, "loss": 0.0}
    record["sds_mean_abs"] = float(np.abs(sds).mean())

    if not np.isfinite(record["loss"]) or not np.isfinite(grad_occ).all() \
            or not np.isfinite(grad_rgb).all():
        record["anomaly"] = True
        return record

    g_posed = render_backward(posed_gs, camera, grad_rgb, grad_occ,
                              background=ctx.background, settings=ctx.raster,
                              internals=internals)
    g = pose_backward(pose_ctx, g_posed)
    if not all(np.isfinite(getattr(g, k)).all() for k in
               ("positions", "rotations", "log_scales", "opacity_logits", "colors")):
        record["anomaly"] = True
        return record

    step_norm = optimizer.step(gaussians, g, lr_scales)
    _project_parameters(gaussians)
    record.update(step_norm=step_norm, grad_pos=g.positions, contributed=g.contributed)
    return record


def _project_parameters(gaussians: GaussianSet) -> None:
    # keep invariants tight after an unconstrained step
    gaussians.rotations /= np.linalg.norm(gaussians.rotations, axis=1, keepdims=True)
    np.clip(gaussians.colors, 0.0, 1.0, out=gaussians.colors)


def _make_optimizer(gaussians: GaussianSet, config: TrainingConfig, extent: float) -> AdamOptimizer:
    lrs = {
        "positions": config.lr_position * extent,
        "rotations": config.lr_rotation,
        "log_scales": config.lr_scale,
        "opacity_logits": config.lr_opacity,
        "colors": config.lr_color,
    }
    return AdamOptimizer(gaussians, lrs, config.adam_beta1, config.adam_beta2, config.adam_eps)


def _position_lr_scale(config: TrainingConfig, step: int, total: int) -> dict:
    progress = step / max(total, 1)
    return {"positions": float(config.lr_position_final**progress)}


class _AnomalyCounter:
    def __init__(self, limit=3):
        self.run, self.limit, self.total = 0, limit, 0

    def update(self, is_anomaly: bool):
        self.run = self.run + 1 if is_anomaly else 0
        self.total += int(is_anomaly)
        if self.run >= self.limit:
            raise InvalidState(f"{self.limit} consecutive non-finite training steps")


# ---------------------------------------------------------------------------
# Stage 1: optimization
# ---------------------------------------------------------------------------


def stage_optimize(gaussians: GaussianSet, ctx: TrainContext, rng: np.random.Generator,
                   log: JsonlLogger | None = None) -> tuple[GaussianSet, list[RenderOutput]]:
    """Run the configured number of optimization steps; no density control
    here (the gaussian count stays constant); returns coarse renders."""
    cfg = ctx.config
    gaussians = gaussians.copy()
    optimizer = _make_optimizer(gaussians, cfg, scene_extent(gaussians))
    anomalies = _AnomalyCounter()
    t0 = time.time()
    for step in range(1, cfg.optimize_steps + 1):
        rec = optimize_step(gaussians, ctx, rng, optimizer,
                            _position_lr_scale(cfg, step, cfg.optimize_steps))
        anomalies.update(rec.get("anomaly", False))
        rec.pop("grad_pos", None)
        rec.pop("contributed", None)
        if log:
            log.write({"type": "step", "stage": "optimize", "step": step,
                       "gaussians": gaussians.n,
                       "timestamp": _now(), **_scrub(rec)})
    coarse = []
    for i, frame in enumerate(ctx.frames):
        posed = pose_gaussians(gaussians, ctx.frame_transforms(i))
        coarse.append(render(posed, frame.camera, background=ctx.background,
                             settings=ctx.raster))
    if log:
        log.write({"type": "stage_done", "stage": "optimize",
                   "seconds": time.time() - t0, "gaussians": gaussians.n})
    return gaussians, coarse


# ---------------------------------------------------------------------------
# Stage 2: refinement
# ---------------------------------------------------------------------------


def stage_refine(gaussians: GaussianSet, ctx: TrainContext, coarse: list[RenderOutput],
                 rng: np.random.Generator, art: StageArtifacts | None = None,
                 log: JsonlLogger | None = None) -> GaussianSet:
    """Refinement: offline in-context inpainting, then finetuning with
    density control active for the first `refine_densify_until` steps."""
    cfg = ctx.config
    w = cfg.refine_weights
    gaussians = gaussians.copy()
    art = art if art is not None else StageArtifacts()

    # offline generation pass (regions from stage-1 occupancy, fixed targets)
    regions, targets = [], []
    for frame, cr in zip(ctx.frames, coarse):
        R = compute_region(frame.mask, cr.occupancy)
        cond = build_pose_condition(ctx.skeleton, frame.pose, frame.camera, cr.depth,
                                    ctx.sigma, "", cfg.negative_prompt)
        seed = _frame_seed(cfg.seed, 2, frame.index)
        try:
            filled = in_context_inpaint(cr.rgb, frame.image, R, cond, ctx.backend,
                                        steps=cfg.inpaint_steps,
                                        conditioning_scale=cfg.refine_conditioning_scale,
                                        seed=seed)
            target = R[..., None] * filled
        except (TransportError, ProtocolError) as exc:
            target = None
            art.refine_inpaint_failures += 1
            if log:
                log.write({"type": "warning", "stage": "refine", "frame": frame.index,
                           "error": str(exc)})
        regions.append(R)
        targets.append(target)
    art.regions = regions
    art.inpaint_targets = targets

    optimizer = _make_optimizer(gaussians, cfg, scene_extent(gaussians))
    extent = scene_extent(gaussians)
    anomalies = _AnomalyCounter()
    grad_accum = np.zeros(gaussians.n)
    grad_count = np.zeros(gaussians.n)
    t0 = time.time()

    for step in range(1, cfg.refine_steps + 1):
        idx = int(rng.integers(len(ctx.frames)))
        frame = ctx.frames[idx]
        posed_gs, pose_ctx = pose_gaussians(gaussians, ctx.frame_transforms(idx),
                                            return_context=True)
        out, internals = render(posed_gs, frame.camera, background=ctx.background,
                                settings=ctx.raster, return_internals=True)
        weights = w
        target = targets[idx]
        if target is None:
            from dataclasses import replace as _rep

            weights = _rep(w, gen=0.0)
            target = np.zeros_like(frame.image)
        res = refinement_loss(frame.image, frame.mask, ctx.masks[idx], target,
                              regions[idx], out, weights)
        rec = {"rho": 1, "frame": idx, "loss": res.total, **res.terms}
        if not np.isfinite(res.total):
            rec["anomaly"] = True
        else:
            g_posed = render_backward(posed_gs, frame.camera, res.grad_rgb,
                                      res.grad_occupancy, background=ctx.background,
                                      settings=ctx.raster, internals=internals)
            g = pose_backward(pose_ctx, g_posed)
            rec["step_norm"] = optimizer.step(gaussians, g,
                                              _position_lr_scale(cfg, step, cfg.refine_steps))
            _project_parameters(gaussians)
            grad_accum += np.linalg.norm(g.positions, axis=1)
            grad_count += g.contributed

        anomalies.update(rec.get("anomaly", False))
        if log:
            log.write({"type": "step", "stage": "refine", "step": step,
                       "gaussians": gaussians.n, "timestamp": _now(), **_scrub(rec)})

        in_window = step <= cfg.refine_densify_until
        if in_window and not cfg.freeze_density and step % cfg.densify_interval == 0:
            mean_grads = grad_accum / np.maximum(grad_count, 1.0)
            gaussians = densify_and_prune(gaussians, mean_grads, cfg, rng, optimizer, extent)
            grad_accum = np.zeros(gaussians.n)
            grad_count = np.zeros(gaussians.n)
            if log:
                log.write({"type": "density", "stage": "refine", "step": step,
                           "gaussians": gaussians.n})
        # merges run on the half-window offset so fresh clones have time to
        # separate before they become fusion candidates
        if in_window and not cfg.freeze_density \
                and step % cfg.densify_interval == cfg.densify_interval // 2:
            gaussians, mapping = merge_kl(gaussians, cfg.kl_merge_threshold,
                                          optimizer, return_mapping=True)
            ok = mapping >= 0
            grad_accum = np.where(ok, grad_accum[np.maximum(mapping, 0)], 0.0)
            grad_count = np.where(ok, grad_count[np.maximum(mapping, 0)], 0.0)
            if log:
                log.write({"type": "density", "stage": "refine", "step": step,
                           "gaussians": gaussians.n, "event": "merge"})

    if log:
        log.write({"type": "stage_done", "stage": "refine",
                   "seconds": time.time() - t0, "gaussians": gaussians.n})
    return gaussians


def _scrub(rec: dict) -> dict:
    return {k: v for k, v in rec.items() if not isinstance(v, np.ndarray)}


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


class Trainer:
    """Runs the selected stages and materializes the run directory:

        config.json                  config snapshot (written first)
        train_log.jsonl              structured step/stage records
        masks/%06d.png               stage-0 completed masks
        coarse/%06d.png + _occ.png   stage-1 renders (rgb + 16-bit occupancy)
        regions/%06d.png             stage-2 inpaint regions (16-bit)
        inpainted/%06d.png           stage-2 generation targets
        stage_optimize.ospl(.json)   checkpoints per stage
        stage_refine.ospl(.json)
    """

    def __init__(self, frames: list[Frame], skeleton: Skeleton, config: TrainingConfig,
                 backend: PriorBackend, out_dir=None, background=(0.0, 0.0, 0.0)):
        if not frames:
            raise InvalidInput("no training frames")
        self.frames = frames
        self.skeleton = skeleton
        self.config = config
        self.backend = backend
        self.background = np.asarray(background, dtype=np.float64)
        self.out_dir = None
        if out_dir is not None:
            from pathlib import Path

            self.out_dir = Path(out_dir)
            self.out_dir.mkdir(parents=True, exist_ok=True)
            config.save(self.out_dir / "config.json")

    def run(self, stages=("init", "optimize", "refine")) -> dict:
        unknown = set(stages) - {"init", "optimize", "refine"}
        if unknown:
            raise InvalidInput(f"unknown stages: {sorted(unknown)}")
        cfg = self.config
        rng_init, rng_opt, rng_ref = (np.random.default_rng(s)
                                      for s in np.random.SeedSequence(cfg.seed).spawn(3))
        del rng_init  # stage 0 uses per-frame hashed seeds; stream reserved

        from .body import template_point_cloud

        pts, wts = template_point_cloud(self.skeleton, cfg.template_spacing)
        template = init_gaussians(self.skeleton, pts, wts,
                                  init_opacity=cfg.init_opacity,
                                  scale_factor=cfg.init_scale_factor)

        log = JsonlLogger(self.out_dir / "train_log.jsonl") if self.out_dir else None
        results = {"artifacts": StageArtifacts(), "checkpoints": {}}
        art = results["artifacts"]
        try:
            if log:
                log.write({"type": "run_header", "stages": list(stages),
                           "seed": cfg.seed, "frames": len(self.frames),
                           "optimize_weights": cfg.optimize_weights.to_json(),
                           "refine_weights": cfg.refine_weights.to_json(),
                           "backend": getattr(self.backend, "kind", "unknown")})

            if "init" in stages:
                got = stage_init(self.frames, self.skeleton, self.backend, cfg,
                                 template, log)
                art.masks = got.masks
                art.init_fallbacks = got.init_fallbacks
            else:
                art.masks = [f.mask.copy() for f in self.frames]
            self._dump_masks(art.masks)

            ctx = make_context(self.frames, art.masks, self.skeleton, cfg,
                               self.backend, self.background)
            gaussians = template.copy()

            if "optimize" in stages:
                gaussians, coarse = stage_optimize(gaussians, ctx, rng_opt, log)
                art.coarse = coarse
                self._dump_coarse(coarse)
                self._save_ckpt(gaussians, "stage_optimize", results)

            if "refine" in stages:
                if not art.coarse:
                    raise InvalidInput("refine stage requires the optimize stage's renders")
                gaussians = stage_refine(gaussians, ctx, art.coarse, rng_ref, art, log)
                self._dump_refine(art)
                self._save_ckpt(gaussians, "stage_refine", results)

            results["gaussians"] = gaussians
            return results
        finally:
            if log:
                log.close()

    # -- artifact dumping -------------------------------------------------

    def _dump_masks(self, masks):
        if self.out_dir:
            for i, m in enumerate(masks):
                save_mask_png(m, self.out_dir / "masks" / f"{i:06d}.png")

    def _dump_coarse(self, coarse):
        if self.out_dir:
            for i, out in enumerate(coarse):
                save_image_png(out.rgb, self.out_dir / "coarse" / f"{i:06d}.png")
                save_occupancy_png(out.occupancy, self.out_dir / "coarse" / f"{i:06d}_occ.png")

    def _dump_refine(self, art: StageArtifacts):
        if self.out_dir:
            for i, (R, tgt) in enumerate(zip(art.regions, art.inpaint_targets)):
                save_occupancy_png(R, self.out_dir / "regions" / f"{i:06d}.png")
                if tgt is not None:
                    save_image_png(tgt, self.out_dir / "inpainted" / f"{i:06d}.png")

    def _save_ckpt(self, gaussians, name, results):
        if self.out_dir:
            path = self.out_dir / f"{name}.ospl"
            save_gaussians(gaussians, path)
            results["checkpoints"][name] = path
        results[name] = gaussians.copy()
