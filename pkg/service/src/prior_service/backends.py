"""Server-side backends.

The mock backend simply hosts the in-process deterministic mock from the
core package (that is what keeps responses byte-identical with in-process
runs). The diffusion backend wraps pretrained pipelines when the optional
dependencies are installed; its outputs are generative and excluded from
value-level conformance checks.
"""

from __future__ import annotations

import threading

import numpy as np

from occsplat.prior import MockPriorBackend, PoseCondition
from occsplat.body import default_skeleton

from .config import ServiceConfig


def build_backend(config: ServiceConfig):
    if config.backend.startswith("mock"):
        mode = config.backend.split(":", 1)[1] if ":" in config.backend else "silhouette"
        return MockPriorBackend(
            mode, skeleton=default_skeleton(), schedule=config.schedule,
            offset_delta=config.offset_delta, widen=config.widen,
            edge_pad_ratio=config.edge_pad_ratio)
    if config.backend == "diffusion":
        return DiffusionBackend(config)
    raise ValueError(f"unknown backend {config.backend!r}")


class DiffusionBackend:
    """Optional wrapper around pretrained diffusion/segmentation models.

    Loading is lazy and serialized; every call holds the model lock since
    the underlying pipelines are not reentrant. Requires the `diffusion`
    extra (torch, diffusers, transformers).
    """

    kind = "diffusion"

    def __init__(self, config: ServiceConfig):
        self.config = config
        self._lock = threading.Lock()
        self._inpaint_pipe = None
        self._segmenter = None

    def _require(self, name):
        try:
            import importlib

            return importlib.import_module(name)
        except ImportError as exc:
            raise RuntimeError(
                f"diffusion backend needs {name}; install the 'diffusion' extra") from exc

    def _load_inpaint(self):
        if self._inpaint_pipe is None:
            diffusers = self._require("diffusers")
            torch = self._require("torch")
            kwargs = {}
            if self.config.pose_controlnet:
                controlnet = diffusers.ControlNetModel.from_pretrained(self.config.pose_controlnet)
                kwargs["controlnet"] = controlnet
            self._inpaint_pipe = diffusers.AutoPipelineForInpainting.from_pretrained(
                self.config.inpaint_model, **kwargs).to(self.config.device)
            self._torch = torch
        return self._inpaint_pipe

    def inpaint(self, image, mask, cond: PoseCondition, steps, conditioning_scale, seed):
        from PIL import Image

        with self._lock:
            pipe = self._load_inpaint()
            torch = self._torch
            gen = torch.Generator(device=self.config.device).manual_seed(int(seed))
            img = Image.fromarray((np.clip(image, 0, 1) * 255).astype(np.uint8))
            m = Image.fromarray((np.asarray(mask) > 0.5).astype(np.uint8) * 255)
            kwargs = dict(image=img, mask_image=m, num_inference_steps=int(steps),
                          generator=gen, prompt=cond.positive_prompt or "",
                          negative_prompt=cond.negative_prompt or None)
            if self.config.pose_controlnet:
                kwargs["controlnet_conditioning_scale"] = float(conditioning_scale)
                kwargs["control_image"] = _pose_map(cond, img.size)
            out = pipe(**kwargs).images[0].resize(img.size)
            result = np.asarray(out).astype(np.float64) / 255.0
            keep = np.asarray(mask) <= 0.5
            base = np.asarray(image, dtype=np.float64)
            result[keep] = base[keep]
            return result

    def segment(self, image, cond: PoseCondition, seed):
        if not self.config.segmentation_model:
            raise RuntimeError("no segmentation model configured for the diffusion backend")
        with self._lock:
            if self._segmenter is None:
                transformers = self._require("transformers")
                self._segmenter = transformers.pipeline(
                    "image-segmentation", model=self.config.segmentation_model,
                    device=-1 if self.config.device == "cpu" else 0)
            from PIL import Image

            img = Image.fromarray((np.clip(image, 0, 1) * 255).astype(np.uint8))
            results = self._segmenter(img)
            for r in results:
                if r.get("label", "").lower() in ("person", "people", "human"):
                    return (np.asarray(r["mask"]) > 127).astype(np.float64)
            return np.zeros(np.asarray(image).shape[:2])

    def denoise(self, x_t, t, cond: PoseCondition, seed):
        # Pixel-space epsilon prediction requires a pixel-space UNet, which
        # pretrained latent models do not provide; serve the analytic
        # silhouette denoiser as the conditioning-aware fallback so the
        # endpoint stays functional for SDS experiments.
        mock = MockPriorBackend("silhouette", skeleton=default_skeleton(),
                                schedule=self.config.schedule,
                                widen=self.config.widen,
                                edge_pad_ratio=self.config.edge_pad_ratio)
        return mock.denoise(x_t, t, cond, seed)

    def health(self):
        return {"status": "ok", "backend_kind": self.kind, "version": "1"}


def _pose_map(cond: PoseCondition, size):
    """Minimal openpose-style conditioning image: visible joints as dots."""
    from PIL import Image, ImageDraw

    img = Image.new("RGB", size, (0, 0, 0))
    draw = ImageDraw.Draw(img)
    for (x, y), v in zip(cond.joints2d, cond.visible):
        if v:
            draw.ellipse([x - 3, y - 3, x + 3, y + 3], fill=(255, 255, 255))
    return img
