"""Protocol conformance: fixture generation and replay.

Fixtures are checked into the repository as ``<case>/meta.json`` +
``request.json`` + ``expected_response.json``; expected responses are the
canonical JSON bytes the reference (mock) service emits. The replay suite
posts each request to a live target and compares raw response bytes; on
mismatch it decodes the payloads and reports field-level differences.
Generative backends only get shape checks ("generative (not value-checked)").
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
from PIL import Image

from occsplat import protocol
from occsplat.body import canonical_da_pose, default_skeleton, forward_kinematics
from occsplat.prior import DiffusionSchedule, MockPriorBackend, PoseCondition

DEFAULT_FIXTURES = Path(__file__).resolve().parents[2] / "fixtures"


# ---------------------------------------------------------------------------
# Fixture generation
# ---------------------------------------------------------------------------


def _frontal_joints(size: int):
    from occsplat.pipeline import project_joints
    from occsplat.splat import Camera

    skel = default_skeleton()
    cam = Camera.look_at((0, 1.1, -3.0), (0, 0.9, 0), size, size, 1.4 * size)
    joints = forward_kinematics(skel, canonical_da_pose(skel)).translations
    return project_joints(joints, cam), np.ones(skel.joint_count, bool)


def _mock(mode: str) -> MockPriorBackend:
    return MockPriorBackend(mode, skeleton=default_skeleton(),
                            schedule=DiffusionSchedule())


def _build_cases() -> list[dict]:
    rng = np.random.default_rng(20240817)
    cases = []

    for mode in MockPriorBackend.MODES:
        for size, t_seed in ((16, 11), (24, 97)):
            x0 = protocol.quantize_image(rng.uniform(0, 1, (size, size, 3)))
            from occsplat.prior import sample_sds_inputs

            smp = sample_sds_inputs(DiffusionSchedule(), x0[..., 0], t_seed)
            joints, vis = _frontal_joints(size)
            req = {
                "x_t": protocol.encode_blob(smp["x_t"]),
                "t": smp["t"],
                "joints2d": protocol.encode_joints(joints, vis),
                "seed": smp["seed"],
            }
            cases.append({
                "name": f"denoise_{mode}_{size}",
                "endpoint": "/v1/denoise",
                "backend_kind": f"mock:{mode}",
                "request": req,
            })

    for size in (32, 48):
        joints, vis = _frontal_joints(size)
        img = protocol.quantize_image(rng.uniform(0, 1, (size, size, 3)))
        cases.append({
            "name": f"segment_{size}",
            "endpoint": "/v1/segment",
            "backend_kind": "mock:*",
            "request": {
                "image": protocol.encode_image(img),
                "joints2d": protocol.encode_joints(joints, vis),
                "seed": 5,
            },
        })

    # template fill: region covers most of the canvas
    size = 40
    joints, vis = _frontal_joints(size)
    img = protocol.quantize_image(rng.uniform(0, 1, (size, size, 3)))
    mask = np.zeros((size, size))
    mask[4:, :] = 1.0
    cases.append({
        "name": "inpaint_template_fill",
        "endpoint": "/v1/inpaint",
        "backend_kind": "mock:*",
        "request": {
            "image": protocol.encode_image(img),
            "mask": protocol.encode_mask(mask),
            "joints2d": protocol.encode_joints(joints, vis),
            "prompts": {"positive": "", "negative": ""},
            "steps": 10, "conditioning_scale": 1.0, "seed": 3,
        },
    })

    # stacked canvas: in-context copy contract
    h = 20
    top = protocol.quantize_image(rng.uniform(0, 1, (h, 24, 3)))
    bottom = protocol.quantize_image(rng.uniform(0, 1, (h, 24, 3)))
    canvas = np.concatenate([top, np.full((8, 24, 3), 0.5), bottom], axis=0)
    cmask = np.zeros((canvas.shape[0], 24))
    cmask[h + 8 + 4: h + 8 + 12, 6:18] = 1.0
    joints, vis = _frontal_joints(24)
    cases.append({
        "name": "inpaint_in_context_copy",
        "endpoint": "/v1/inpaint",
        "backend_kind": "mock:*",
        "request": {
            "image": protocol.encode_image(canvas),
            "mask": protocol.encode_mask(cmask),
            "joints2d": protocol.encode_joints(joints, vis),
            "prompts": {"positive": "", "negative": ""},
            "steps": 10, "conditioning_scale": 0.3, "seed": 4,
        },
    })

    for mode in MockPriorBackend.MODES:
        cases.append({
            "name": f"health_{mode}",
            "endpoint": "/v1/health",
            "backend_kind": f"mock:{mode}",
            "request": {},
        })
    return cases


def _reference_response(case: dict, mode: str) -> dict:
    backend = _mock(mode)
    req = case["request"]
    endpoint = case["endpoint"]
    if endpoint == "/v1/health":
        return {"status": "ok", "backend_kind": f"mock:{mode}", "version": _service_version()}
    joints, vis = protocol.decode_joints(req["joints2d"])
    prompts = req.get("prompts") or {}
    cond = PoseCondition(joints, vis, prompts.get("positive", ""), prompts.get("negative", ""))
    if endpoint == "/v1/denoise":
        out = backend.denoise(protocol.decode_blob(req["x_t"]), req["t"], cond, req["seed"])
        return {"epsilon_hat": protocol.encode_blob(out)}
    if endpoint == "/v1/segment":
        out = backend.segment(protocol.decode_image(req["image"]), cond, req["seed"])
        return {"mask": protocol.encode_mask(out)}
    if endpoint == "/v1/inpaint":
        image = protocol.decode_image(req["image"])
        mask = protocol.decode_mask(req["mask"])
        out = backend.inpaint(image, mask, cond, req["steps"],
                              req["conditioning_scale"], req["seed"])
        keep = mask <= 0.5
        out[keep] = image[keep]
        return {"image": protocol.encode_image(out)}
    raise ValueError(endpoint)


def _service_version() -> str:
    from .app import SERVICE_VERSION

    return SERVICE_VERSION


def generate_fixtures(root=DEFAULT_FIXTURES) -> list[str]:
    """Regenerate the fixture corpus from the in-process mock."""
    root = Path(root)
    written = []
    for case in _build_cases():
        mode = (case["backend_kind"].split(":", 1)[1]
                if case["backend_kind"] != "mock:*" else "silhouette")
        expected = _reference_response(case, mode)
        d = root / case["name"]
        d.mkdir(parents=True, exist_ok=True)
        (d / "meta.json").write_text(json.dumps(
            {"endpoint": case["endpoint"], "backend_kind": case["backend_kind"]},
            indent=2))
        (d / "request.json").write_text(json.dumps(case["request"], sort_keys=True))
        (d / "expected_response.json").write_bytes(protocol.canonical_json(expected))
        written.append(case["name"])
    return written


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


def _png_info(obj) -> tuple:
    raw = __import__("base64").b64decode(obj["png_b64"])
    img = Image.open(io.BytesIO(raw))
    return img.mode, img.size


def _diff_fields(endpoint: str, expected: dict, got: dict) -> list[str]:
    problems = []
    keys = set(expected) | set(got)
    for key in sorted(keys):
        if key not in got:
            problems.append(f"{key}: missing from response")
            continue
        if key not in expected:
            problems.append(f"{key}: unexpected field")
            continue
        e, g = expected[key], got[key]
        if isinstance(e, dict) and "png_b64" in e:
            if not isinstance(g, dict) or "png_b64" not in g:
                problems.append(f"{key}: not a PNG payload")
                continue
            em, esz = _png_info(e)
            try:
                gm, gsz = _png_info(g)
            except Exception as exc:
                problems.append(f"{key}: undecodable PNG ({exc})")
                continue
            if em != gm:
                problems.append(f"{key}: dtype mismatch ({gm} != {em})")
            if esz != gsz:
                problems.append(f"{key}: size mismatch ({gsz} != {esz})")
            if em == gm and esz == gsz and e["png_b64"] != g["png_b64"]:
                problems.append(f"{key}: pixel values differ")
        elif isinstance(e, dict) and "b64" in e:
            for sub in ("dtype", "shape"):
                if e.get(sub) != g.get(sub):
                    problems.append(f"{key}: {sub} mismatch ({g.get(sub)} != {e.get(sub)})")
            if e.get("b64") != g.get("b64"):
                problems.append(f"{key}: values differ")
        elif e != g:
            problems.append(f"{key}: {g!r} != {e!r}")
    return problems


def _shape_check(endpoint: str, request: dict, got: dict) -> list[str]:
    problems = []
    try:
        if endpoint == "/v1/denoise":
            out = protocol.decode_blob(got["epsilon_hat"])
            want = tuple(request["x_t"]["shape"])
            if out.shape != want:
                problems.append(f"epsilon_hat: shape {out.shape} != {want}")
        elif endpoint == "/v1/segment":
            protocol.decode_mask(got["mask"])
        elif endpoint == "/v1/inpaint":
            protocol.decode_image(got["image"])
        elif endpoint == "/v1/health":
            for key in ("status", "backend_kind", "version"):
                if key not in got:
                    problems.append(f"{key}: missing from health response")
    except Exception as exc:
        problems.append(f"undecodable response: {exc}")
    return problems


def run_suite(target_url: str, fixtures_root=DEFAULT_FIXTURES, timeout: float = 60.0) -> dict:
    """Replay the fixture corpus against a live service."""
    import requests

    target_url = target_url.rstrip("/")
    report = {"target": target_url, "cases": [], "passed": False}
    try:
        health = requests.get(f"{target_url}/v1/health", timeout=timeout).json()
    except requests.RequestException as exc:
        report["transport_failure"] = f"{type(exc).__name__}: {exc}"
        return report
    kind = health.get("backend_kind", "unknown")
    report["backend_kind"] = kind
    value_checked = kind.startswith("mock:")

    n_fail = 0
    for d in sorted(Path(fixtures_root).iterdir()):
        if not (d / "meta.json").exists():
            continue
        meta = json.loads((d / "meta.json").read_text())
        want_kind = meta["backend_kind"]
        if value_checked and want_kind not in ("mock:*", kind):
            continue  # a denoise fixture for a different mock mode
        request = json.loads((d / "request.json").read_text())
        expected_bytes = (d / "expected_response.json").read_bytes()
        entry = {"case": d.name, "endpoint": meta["endpoint"]}
        try:
            if meta["endpoint"] == "/v1/health":
                resp = requests.get(f"{target_url}{meta['endpoint']}", timeout=timeout)
            else:
                resp = requests.post(f"{target_url}{meta['endpoint']}", json=request,
                                     timeout=timeout)
        except requests.RequestException as exc:
            entry.update(status="fail", mismatches=[f"transport: {exc}"])
            report["cases"].append(entry)
            n_fail += 1
            continue

        if not value_checked:
            problems = _shape_check(meta["endpoint"], request, _safe_json(resp))
            entry["status"] = "fail" if problems else "generative (not value-checked)"
            entry["mismatches"] = problems
            n_fail += bool(problems)
        elif resp.content == expected_bytes and resp.status_code == 200:
            entry["status"] = "pass"
            entry["mismatches"] = []
        else:
            expected = json.loads(expected_bytes)
            problems = [f"http status {resp.status_code}"] if resp.status_code != 200 else []
            problems += _diff_fields(meta["endpoint"], expected, _safe_json(resp))
            entry["status"] = "fail"
            entry["mismatches"] = problems or ["byte-level mismatch"]
            n_fail += 1
        report["cases"].append(entry)

    report["passed"] = n_fail == 0 and bool(report["cases"])
    report["failed_cases"] = n_fail
    return report


def _safe_json(resp) -> dict:
    try:
        return resp.json()
    except ValueError:
        return {}
