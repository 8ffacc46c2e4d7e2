"""On-disk formats: gaussian checkpoints, PNG images, atomic writes.

Checkpoint layout (little-endian), extension ``.ospl``:

    bytes 0-3   magic "OSPL"
    u32         format version (1)
    u64         N, gaussian count
    u32         C, color coefficient count per channel (1 or 4)
    u32         K, skinning joint count (0 if absent)
    f64[N*3]    positions
    f64[N*4]    rotations (quaternions, w x y z)
    f64[N*3]    log scales
    f64[N]      opacity logits
    f64[N*C*3]  color coefficients
    f64[N*K]    skinning weights

A JSON sidecar (same stem, ``.json``) repeats the metadata for humans.

Images: rgb as 8-bit PNG; occupancy as 16-bit PNG scaled by 65535 over
[0, 1]; depth as 16-bit PNG in millimeters with 0 reserved for empty
(+inf) pixels.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .splat import GaussianSet

_MAGIC = b"OSPL"
_VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_gaussians(gs: GaussianSet, path) -> None:
    path = Path(path)
    K = 0 if gs.skin_weights is None else gs.skin_weights.shape[1]
    C = gs.colors.shape[1]
    parts = [_MAGIC, struct.pack("<IQII", _VERSION, gs.n, C, K)]
    for arr in (gs.positions, gs.rotations, gs.log_scales, gs.opacity_logits, gs.colors):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    if K:
        parts.append(np.ascontiguousarray(gs.skin_weights, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))
    sidecar = {
        "format": "ospl", "version": _VERSION, "count": gs.n,
        "color_coeffs": C, "joint_count": K, "dtype": "<f8",
        "fields": ["positions", "rotations", "log_scales", "opacity_logits",
                   "colors", "skin_weights"],
    }
    atomic_write_text(path.with_suffix(".json"), json.dumps(sidecar, indent=2))


def load_gaussians(path) -> GaussianSet:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: bad magic, not a gaussian checkpoint")
    version, n, C, K = struct.unpack_from("<IQII", raw, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<IQII")

    def take(count, shape):
        nonlocal off
        nbytes = count * 8
        if off + nbytes > len(raw):
            raise DataError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
        return arr

    positions = take(n * 3, (n, 3))
    rotations = take(n * 4, (n, 4))
    log_scales = take(n * 3, (n, 3))
    opacity_logits = take(n, (n,))
    colors = take(n * C * 3, (n, C, 3))
    skin = take(n * K, (n, K)) if K else None
    return GaussianSet(positions, rotations, log_scales, opacity_logits, colors, skin)


# ---------------------------------------------------------------------------
# PNG helpers
# ---------------------------------------------------------------------------


def save_image_png(img, path) -> None:
    u8 = np.round(np.clip(np.asarray(img), 0.0, 1.0) * 255.0).astype(np.uint8)
    _save_pil(Image.fromarray(u8, mode="RGB"), path)


def load_image_png(path) -> np.ndarray:
    arr = _load_array(path)
    if arr.ndim != 3:
        raise DataError(f"{path}: expected RGB image")
    return arr[..., :3].astype(np.float64) / 255.0


def save_mask_png(mask, path) -> None:
    u8 = np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8)
    _save_pil(Image.fromarray(u8, mode="L"), path)


def load_mask_png(path) -> np.ndarray:
    arr = _load_array(path)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected grayscale mask")
    return (arr > 127).astype(np.float64)


def save_occupancy_png(occ, path) -> None:
    u16 = np.round(np.clip(np.asarray(occ), 0.0, 1.0) * 65535.0).astype(np.uint16)
    _save_pil(Image.fromarray(u16), path)


def load_occupancy_png(path) -> np.ndarray:
    return _load_array(path).astype(np.float64) / 65535.0


def save_depth_png(depth, path) -> None:
    d = np.asarray(depth, dtype=np.float64)
    mm = np.where(np.isfinite(d), np.clip(np.round(d * 1000.0), 1, 65535), 0).astype(np.uint16)
    _save_pil(Image.fromarray(mm), path)


def load_depth_png(path) -> np.ndarray:
    mm = _load_array(path).astype(np.float64)
    out = mm / 1000.0
    out[mm == 0] = np.inf
    return out


def _save_pil(img: Image.Image, path) -> None:
    import io as _io

    buf = _io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def _load_array(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


class JsonlLogger:
    """Append-only JSON-lines writer for structured training logs."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
