"""FastAPI application implementing the generative-prior wire protocol.

Responses are serialized with a canonical JSON encoder (sorted keys,
compact separators) so conformance fixtures can compare raw bytes.
"""

from __future__ import annotations

import uuid

import numpy as np
from fastapi import FastAPI, Request, Response

from occsplat import protocol
from occsplat.errors import InvalidInput, ProtocolError
from occsplat.prior import PoseCondition

from .backends import build_backend
from .config import ServiceConfig

SERVICE_VERSION = "0.1.0"


def _json_response(payload: dict, status_code: int = 200) -> Response:
    return Response(content=protocol.canonical_json(payload),
                    media_type="application/json", status_code=status_code)


def _bad_request(msg: str) -> Response:
    return _json_response({"error": str(msg)}, status_code=400)


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    backend = build_backend(config)
    app = FastAPI(title="prior-service", version=SERVICE_VERSION)
    app.state.config = config
    app.state.backend = backend

    @app.middleware("http")
    async def limit_and_catch(request: Request, call_next):
        length = request.headers.get("content-length")
        if length and int(length) > config.max_request_bytes:
            return _json_response({"error": "payload too large"}, status_code=413)
        try:
            return await call_next(request)
        except (ProtocolError, InvalidInput, KeyError, TypeError, ValueError) as exc:
            return _bad_request(exc)
        except Exception as exc:  # backend failure
            incident = uuid.uuid4().hex[:12]
            return _json_response({"error": str(exc), "incident_id": incident},
                                  status_code=500)

    def _cond(body: dict) -> PoseCondition:
        joints, visible = protocol.decode_joints(body.get("joints2d", []))
        prompts = body.get("prompts") or {}
        return PoseCondition(joints, visible,
                             prompts.get("positive", ""), prompts.get("negative", ""))

    @app.post("/v1/inpaint")
    async def inpaint(request: Request):
        body = await request.json()
        image = protocol.decode_image(body["image"])
        mask = protocol.decode_mask(body["mask"])
        if mask.shape != image.shape[:2]:
            return _bad_request(f"mask shape {mask.shape} != image {image.shape[:2]}")
        out = backend.inpaint(
            image, mask, _cond(body),
            steps=int(body.get("steps", config.default_steps)),
            conditioning_scale=float(body.get("conditioning_scale",
                                              config.default_conditioning_scale_init)),
            seed=int(body.get("seed", 0)))
        # outside-mask passthrough is part of the protocol contract
        keep = mask <= 0.5
        out[keep] = image[keep]
        return _json_response({"image": protocol.encode_image(out)})

    @app.post("/v1/segment")
    async def segment(request: Request):
        body = await request.json()
        image = protocol.decode_image(body["image"])
        cond = _cond(body)
        if not np.asarray(cond.visible).any():
            return _bad_request("segmentation requires at least one visible joint")
        mask = backend.segment(image, cond, seed=int(body.get("seed", 0)))
        return _json_response({"mask": protocol.encode_mask(mask)})

    @app.post("/v1/denoise")
    async def denoise(request: Request):
        body = await request.json()
        x_t = protocol.decode_blob(body["x_t"])
        eps_hat = backend.denoise(x_t, int(body["t"]), _cond(body),
                                  seed=int(body.get("seed", 0)))
        return _json_response({"epsilon_hat": protocol.encode_blob(eps_hat)})

    @app.get("/v1/health")
    async def health():
        info = backend.health()
        return _json_response({"status": info.get("status", "ok"),
                               "backend_kind": getattr(backend, "kind", "unknown"),
                               "version": SERVICE_VERSION})

    return app
