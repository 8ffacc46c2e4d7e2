"""Wire encodings for the generative-prior protocol.

Everything that crosses the HTTP boundary is defined here, bit-exactly:

- images: base64 of an 8-bit RGB PNG, field ``{"png_b64": str}``;
- masks: base64 of an 8-bit grayscale PNG with values {0, 255};
- float blobs (noise fields): base64 of little-endian float32 bytes plus an
  explicit shape, field ``{"b64": str, "shape": [...], "dtype": "<f4"}``;
- 2D joints: ``[{"x": float, "y": float, "visible": bool}, ...]``;
- prompts: ``{"positive": str, "negative": str}``.

Endpoints (HTTP/1.1, JSON bodies):

- ``POST /v1/inpaint``  {image, mask, joints2d, prompts, steps:int,
  conditioning_scale:float, seed:int} -> {image}
- ``POST /v1/segment``  {image, joints2d, seed:int} -> {mask}
- ``POST /v1/denoise``  {x_t, t:int, joints2d, seed:int} -> {epsilon_hat}
- ``GET  /v1/health``  -> {status, backend_kind, version}

Quantization rule: float images are mapped to the 8-bit grid with
``round(clip(x, 0, 1) * 255)`` (numpy's round-half-even); decoding divides by
255. The in-process mock applies the same rule so that in-process and remote
mock results are byte-identical.
"""

from __future__ import annotations

import base64
import io
import json

import numpy as np
from PIL import Image

from .errors import ProtocolError

PROTOCOL_VERSION = "1"


def float_to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def u8_to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 255.0


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Snap a float image to the representable 8-bit grid."""
    return u8_to_float(float_to_u8(img))


def encode_image(img: np.ndarray) -> dict:
    u8 = float_to_u8(np.asarray(img))
    if u8.ndim != 3 or u8.shape[2] != 3:
        raise ProtocolError(f"image must be HxWx3, got {u8.shape}")
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return {"png_b64": base64.b64encode(buf.getvalue()).decode("ascii")}


def decode_image(obj: dict) -> np.ndarray:
    arr = _decode_png(obj)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ProtocolError(f"decoded image has shape {arr.shape}, expected HxWx3")
    return u8_to_float(arr)


def encode_mask(mask: np.ndarray) -> dict:
    m = np.asarray(mask)
    u8 = np.where(m > 0.5, 255, 0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="L").save(buf, format="PNG")
    return {"png_b64": base64.b64encode(buf.getvalue()).decode("ascii")}


def decode_mask(obj: dict) -> np.ndarray:
    arr = _decode_png(obj)
    if arr.ndim != 2:
        raise ProtocolError(f"decoded mask has shape {arr.shape}, expected HxW")
    if not np.all((arr == 0) | (arr == 255)):
        raise ProtocolError("mask PNG contains values other than 0/255")
    return (arr == 255).astype(np.float64)


def _decode_png(obj) -> np.ndarray:
    if not isinstance(obj, dict) or "png_b64" not in obj:
        raise ProtocolError("expected an object with a png_b64 field")
    try:
        raw = base64.b64decode(obj["png_b64"])
        return np.asarray(Image.open(io.BytesIO(raw)))
    except ProtocolError:
        raise
    except Exception as exc:
        raise ProtocolError(f"bad PNG payload: {exc}") from exc


def encode_blob(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "b64": base64.b64encode(a.tobytes()).decode("ascii"),
        "shape": list(a.shape),
        "dtype": "<f4",
    }


def decode_blob(obj: dict) -> np.ndarray:
    if not isinstance(obj, dict) or not {"b64", "shape", "dtype"} <= set(obj):
        raise ProtocolError("expected a blob object with b64/shape/dtype")
    if obj["dtype"] != "<f4":
        raise ProtocolError(f"unsupported blob dtype {obj['dtype']!r}")
    try:
        raw = base64.b64decode(obj["b64"])
        arr = np.frombuffer(raw, dtype="<f4").reshape(obj["shape"])
    except Exception as exc:
        raise ProtocolError(f"bad blob payload: {exc}") from exc
    return arr.copy()


def encode_joints(joints2d: np.ndarray, visible: np.ndarray) -> list[dict]:
    return [
        {"x": float(x), "y": float(y), "visible": bool(v)}
        for (x, y), v in zip(np.asarray(joints2d), np.asarray(visible))
    ]


def decode_joints(items) -> tuple[np.ndarray, np.ndarray]:
    if not isinstance(items, list):
        raise ProtocolError("joints2d must be a list")
    try:
        pts = np.array([[j["x"], j["y"]] for j in items], dtype=np.float64).reshape(-1, 2)
        vis = np.array([bool(j["visible"]) for j in items], dtype=bool)
    except (KeyError, TypeError) as exc:
        raise ProtocolError(f"bad joints2d entry: {exc}") from exc
    return pts, vis


def canonical_json(payload: dict) -> bytes:
    """Deterministic JSON bytes used for responses and conformance fixtures."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
