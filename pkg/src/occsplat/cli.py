"""Command-line entry point.

Subcommands: gen-data, train, render, eval, info. Every run writes its
config snapshot before doing work; failures exit 1 with a single
machine-parsable ``error.<class>: message`` line on stderr (usage errors
exit 2 via argparse).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import TrainingConfig
from .data import SceneSpec, generate_scene, load_dataset, save_dataset
from .errors import OccSplatError
from .fileio import load_gaussians, save_image_png, save_mask_png
from .losses import eval_metrics, metrics_report, write_metrics_csv, write_metrics_json
from .recon import AvatarReconstructor


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occsplat",
        description="Occlusion-aware reconstruction of articulated bodies "
                    "with skinned 3D gaussians.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic occluded dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0, help="scene seed (default: 0)")
    p.add_argument("--frames", type=int, default=50, help="frame count (default: 50)")
    p.add_argument("--size", type=int, default=128, help="image size in pixels (default: 128)")
    p.add_argument("--occlusion-pixels", type=float, default=0.5,
                   help="fraction of body pixels masked (default: 0.5)")
    p.add_argument("--occlusion-frames", type=float, default=0.8,
                   help="fraction of frames occluded (default: 0.8)")

    p = sub.add_parser("train", help="run the reconstruction stages")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--backend", default="mock:silhouette",
                   help="prior backend: mock:<oracle|offset|silhouette> or "
                        "remote:<url> (default: mock:silhouette)")
    p.add_argument("--stages", default="init,optimize,refine",
                   help="comma-separated stage subset (default: init,optimize,refine)")
    p.add_argument("--seed", type=int, default=None,
                   help="training seed override (default: config value)")
    p.add_argument("--config", default=None, help="training config JSON file (default: built-in)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override, repeatable (default: none)")

    p = sub.add_parser("render", help="render views from a checkpoint")
    p.add_argument("--ckpt", required=True, help="gaussian checkpoint (.ospl)")
    p.add_argument("--data", required=True, help="dataset directory (poses and cameras)")
    p.add_argument("--out", required=True, help="output directory for renders")
    p.add_argument("--views", choices=("novel", "train"), default="novel",
                   help="which views to render (default: novel)")

    p = sub.add_parser("eval", help="compare rendered images against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted images")
    p.add_argument("--gt", required=True, help="directory of ground-truth images")
    p.add_argument("--out", default=None, help="metrics report JSON path (default: stdout)")
    p.add_argument("--csv", default=None, help="also write a CSV table (default: off)")
    p.add_argument("--visible-only", action="store_true",
                   help="restrict metrics to visible pixels (default: off)")
    p.add_argument("--masks", default=None,
                   help="directory of visibility masks; with --visible-only, defaults "
                        "to <stem>_mask.png next to each ground-truth image")

    p = sub.add_parser("info", help="summarize a checkpoint")
    p.add_argument("--ckpt", required=True, help="gaussian checkpoint (.ospl)")
    return parser


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    spec = SceneSpec(frame_count=args.frames, width=args.size, height=args.size,
                     seed=args.seed,
                     occlusion_fraction_pixels=args.occlusion_pixels,
                     occlusion_fraction_frames=args.occlusion_frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scene_request.json").write_text(json.dumps(spec.to_json(), indent=2))
    scene = generate_scene(spec)
    save_dataset(scene, out)
    print(f"wrote {len(scene.frames)} frames to {out}")
    return 0


def _cmd_train(args) -> int:
    config = TrainingConfig.load(args.config) if args.config else TrainingConfig()
    if args.overrides:
        config = config.apply_overrides(args.overrides)
    if args.seed is not None:
        config.seed = args.seed
    stages = tuple(s.strip() for s in args.stages.split(",") if s.strip())
    ds = load_dataset(args.data)
    recon = AvatarReconstructor(config=config, backend=args.backend, stages=stages,
                                background=ds.background, out_dir=args.out)
    recon.fit(ds.frames, ds.skeleton)
    art = recon.artifacts_
    print(f"trained {recon.gaussians_.n} gaussians over stages {','.join(stages)}"
          f" (init fallbacks: {art.init_fallbacks},"
          f" inpaint failures: {art.refine_inpaint_failures})")
    return 0


def _cmd_render(args) -> int:
    from .body import skinning_transforms
    from .splat import pose_gaussians, render

    ds = load_dataset(args.data)
    gaussians = load_gaussians(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    if args.views == "novel":
        for fi, ci in ds.novel_items:
            jobs.append((f"f{fi:06d}_c{ci:02d}", ds.frames[fi].pose, ds.eval_cameras[ci]))
    else:
        for f in ds.frames:
            jobs.append((f"{f.index:06d}", f.pose, f.camera))
    for stem, pose, camera in jobs:
        posed = pose_gaussians(gaussians, skinning_transforms(ds.skeleton, pose))
        res = render(posed, camera, background=ds.background)
        save_image_png(res.rgb, out / f"{stem}.png")
        save_mask_png(res.occupancy > 0.5, out / f"{stem}_mask.png")
    print(f"rendered {len(jobs)} views to {out}")
    return 0


def _cmd_eval(args) -> int:
    from .fileio import load_image_png, load_mask_png
    from .errors import DataError

    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    names = sorted(p.name for p in gt_dir.glob("*.png") if not p.name.endswith("_mask.png"))
    if not names:
        raise DataError(f"no ground-truth images in {gt_dir}")
    rows = []
    for name in names:
        pred_path = pred_dir / name
        if not pred_path.exists():
            raise DataError(f"missing prediction {pred_path}")
        pred = load_image_png(pred_path)
        gt = load_image_png(gt_dir / name)
        mask = None
        if args.visible_only:
            stem = name[:-4]
            candidates = [gt_dir / f"{stem}_mask.png"]
            if args.masks:
                candidates.insert(0, Path(args.masks) / name)
            mask_path = next((c for c in candidates if c.exists()), None)
            if mask_path is None:
                raise DataError(f"no visibility mask found for {name}")
            mask = load_mask_png(mask_path)
        m = eval_metrics(pred, gt, visible_mask=mask)
        m["name"] = name
        rows.append(m)
    report = metrics_report(rows)
    if args.out:
        write_metrics_json(report, args.out)
    else:
        print(json.dumps(report, indent=2))
    if args.csv:
        write_metrics_csv(report, args.csv)
    agg = report["aggregate"]
    print(f"aggregate: psnr={agg['psnr']:.3f} ssim={agg['ssim']:.4f} "
          f"lpips_proxy={agg['lpips_proxy']:.4f} over {len(rows)} images")
    return 0


def _cmd_info(args) -> int:
    gs = load_gaussians(args.ckpt)
    lo = gs.positions.min(axis=0) if gs.n else np.zeros(3)
    hi = gs.positions.max(axis=0) if gs.n else np.zeros(3)
    info = {
        "count": gs.n,
        "sh_degree": gs.sh_degree,
        "joint_count": 0 if gs.skin_weights is None else gs.skin_weights.shape[1],
        "bbox_min": [round(float(v), 4) for v in lo],
        "bbox_max": [round(float(v), 4) for v in hi],
        "opacity_mean": round(float(gs.opacities.mean()), 4) if gs.n else None,
        "scale_mean": round(float(gs.scales.mean()), 5) if gs.n else None,
    }
    print(json.dumps(info, indent=2))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "info": _cmd_info,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except OccSplatError as exc:
        print(f"error.{exc.code}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error.internal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
