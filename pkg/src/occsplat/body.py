"""Simplified skinned articulated body.

A skeleton is a topologically sorted joint tree with per-joint rest offsets
and bone scale factors. Posing goes through forward kinematics and linear
blend skinning; the surface is a capsule-per-bone template point cloud that
also supplies skinning weights for arbitrary nearby points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInput
from .rotations import axis_angle_to_matrix
from .validation import as_array, check_finite, check_positive

# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class Skeleton:
    """Joint hierarchy with rest offsets (parent-relative) and bone scales."""

    parents: np.ndarray          # (K,) int, -1 for the single root
    rest_offsets: np.ndarray     # (K, 3) parent-relative offsets, world units
    bone_scales: np.ndarray      # (K,) positive scale factor applied to rest offsets
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_offsets = as_array(self.rest_offsets, (-1, 3), "rest_offsets")
        self.bone_scales = np.asarray(self.bone_scales, dtype=np.float64)
        K = self.parents.shape[0]
        if K < 1:
            raise InvalidInput("skeleton: needs at least one joint")
        if self.rest_offsets.shape[0] != K or self.bone_scales.shape[0] != K:
            raise InvalidInput("skeleton: field lengths disagree")
        if (self.parents == -1).sum() != 1 or self.parents[0] != -1:
            raise InvalidInput("skeleton: exactly one root at index 0 required")
        if np.any(self.parents[1:] >= np.arange(1, K)):
            raise InvalidInput("skeleton: parents must be topologically sorted")
        if np.any(self.bone_scales <= 0):
            raise InvalidInput("skeleton: bone scales must be positive")
        if not self.names:
            self.names = [f"joint_{i}" for i in range(K)]

    @property
    def joint_count(self) -> int:
        return self.parents.shape[0]

    def scaled_offsets(self) -> np.ndarray:
        return self.rest_offsets * self.bone_scales[:, None]

    def rest_joint_positions(self) -> np.ndarray:
        """World joint positions in the rest configuration."""
        offs = self.scaled_offsets()
        pos = np.zeros_like(offs)
        pos[0] = offs[0]
        for k in range(1, self.joint_count):
            pos[k] = pos[self.parents[k]] + offs[k]
        return pos

    def mean_bone_length(self) -> float:
        offs = self.scaled_offsets()[1:]
        if len(offs) == 0:
            return 1.0
        return float(np.linalg.norm(offs, axis=1).mean())

    def to_json(self) -> dict:
        return {
            "joints": [
                {
                    "name": self.names[k],
                    "parent": int(self.parents[k]),
                    "offset": [float(v) for v in self.rest_offsets[k]],
                    "bone_scale": float(self.bone_scales[k]),
                }
                for k in range(self.joint_count)
            ]
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Skeleton":
        joints = obj["joints"]
        return cls(
            parents=np.array([j["parent"] for j in joints], dtype=np.int64),
            rest_offsets=np.array([j["offset"] for j in joints], dtype=np.float64),
            bone_scales=np.array([j["bone_scale"] for j in joints], dtype=np.float64),
            names=[j["name"] for j in joints],
        )


@dataclass
class Pose:
    """Per-joint axis-angle rotations plus a global rigid transform."""

    rotations: np.ndarray           # (K, 3) axis-angle, radians
    global_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    global_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotations = as_array(self.rotations, (-1, 3), "rotations")
        self.global_rotation = as_array(self.global_rotation, (3,), "global_rotation")
        self.global_translation = as_array(self.global_translation, (3,), "global_translation")
        check_finite(self.rotations, "rotations")
        check_finite(self.global_rotation, "global_rotation")
        check_finite(self.global_translation, "global_translation")
        mags = np.linalg.norm(self.rotations, axis=1)
        if np.any(mags >= 2 * np.pi):
            raise InvalidInput("pose: axis-angle magnitude must be < 2*pi")

    @classmethod
    def identity(cls, joint_count: int) -> "Pose":
        return cls(np.zeros((joint_count, 3)))

    def to_json(self) -> dict:
        return {
            "rotations": [[float(v) for v in r] for r in self.rotations],
            "global_rotation": [float(v) for v in self.global_rotation],
            "global_translation": [float(v) for v in self.global_translation],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Pose":
        return cls(
            rotations=np.array(obj["rotations"], dtype=np.float64),
            global_rotation=np.array(obj["global_rotation"], dtype=np.float64),
            global_translation=np.array(obj["global_translation"], dtype=np.float64),
        )


@dataclass
class JointTransforms:
    """Per-joint rigid transforms: x -> R @ x + t."""

    rotations: np.ndarray     # (K, 3, 3)
    translations: np.ndarray  # (K, 3)

    def __post_init__(self):
        self.rotations = as_array(self.rotations, (-1, 3, 3), "rotations")
        self.translations = as_array(self.translations, (-1, 3), "translations")
        if self.rotations.shape[0] != self.translations.shape[0]:
            raise InvalidInput("joint transforms: field lengths disagree")

    @property
    def joint_count(self) -> int:
        return self.rotations.shape[0]

    @classmethod
    def identity(cls, joint_count: int) -> "JointTransforms":
        return cls(np.tile(np.eye(3), (joint_count, 1, 1)), np.zeros((joint_count, 3)))

    def compose_inverse_of(self, rest: "JointTransforms") -> "JointTransforms":
        """Return self o rest^{-1} per joint (maps rest space to posed space)."""
        R = self.rotations @ rest.rotations.transpose(0, 2, 1)
        t = self.translations - np.einsum("kij,kj->ki", R, rest.translations)
        return JointTransforms(R, t)


def check_skin_weights(weights, joint_count: int) -> np.ndarray:
    """Validate an (N, K) skinning weight matrix: rows >= 0, summing to 1."""
    w = as_array(weights, (-1, joint_count), "skin weights")
    if np.any(w < -1e-12):
        raise InvalidInput("skin weights: negative entries")
    if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
        raise InvalidInput("skin weights: rows must sum to 1")
    return w


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> JointTransforms:
    """World-space rigid transform per joint by parent-chain composition.

    Joint k pivots at its own origin: R_k = R_parent @ R_local(k) and
    t_k = t_parent + R_parent @ scaled_offset(k). The root additionally
    composes the pose's global rotation/translation.
    """
    K = skeleton.joint_count
    if pose.rotations.shape[0] != K:
        raise InvalidInput(f"pose has {pose.rotations.shape[0]} joints, skeleton has {K}")
    local = axis_angle_to_matrix(pose.rotations)
    offs = skeleton.scaled_offsets()
    Rg = axis_angle_to_matrix(pose.global_rotation)

    R = np.empty((K, 3, 3))
    t = np.empty((K, 3))
    R[0] = Rg @ local[0]
    t[0] = pose.global_translation + Rg @ offs[0]
    for k in range(1, K):
        p = skeleton.parents[k]
        R[k] = R[p] @ local[k]
        t[k] = t[p] + R[p] @ offs[k]
    return JointTransforms(R, t)


def skinning_transforms(skeleton: Skeleton, pose: Pose) -> JointTransforms:
    """Per-joint transforms mapping the rest (canonical) configuration to `pose`."""
    posed = forward_kinematics(skeleton, pose)
    rest = forward_kinematics(skeleton, Pose.identity(skeleton.joint_count))
    return posed.compose_inverse_of(rest)


def lbs_transform(points, weights, transforms: JointTransforms) -> np.ndarray:
    """Linear blend skinning: x_out = sum_k w_k (R_k x + t_k)."""
    pts = as_array(points, (-1, 3), "points")
    w = check_skin_weights(weights, transforms.joint_count)
    if w.shape[0] != pts.shape[0]:
        raise InvalidInput(f"weights rows ({w.shape[0]}) != point count ({pts.shape[0]})")
    # Blend the affine maps first, then apply: cheaper than per-joint point transforms.
    A = np.einsum("nk,kij->nij", w, transforms.rotations)
    b = w @ transforms.translations
    return np.einsum("nij,nj->ni", A, pts) + b


def blended_point_transforms(weights, transforms: JointTransforms) -> tuple[np.ndarray, np.ndarray]:
    """Per-point blended affine maps (A, b) with x_out = A x + b."""
    w = check_skin_weights(weights, transforms.joint_count)
    A = np.einsum("nk,kij->nij", w, transforms.rotations)
    b = w @ transforms.translations
    return A, b


# ---------------------------------------------------------------------------
# Canonical spread ("Da") pose
# ---------------------------------------------------------------------------

_DA_POSE_ANGLES = {
    # rotations about the body's forward (z) axis: abduct arms down, legs out
    "l_shoulder": -0.55,
    "r_shoulder": 0.55,
    "l_hip": 0.22,
    "r_hip": -0.22,
}


def canonical_da_pose(skeleton: Skeleton) -> Pose:
    """Deterministic star pose: arms lowered from T, legs abducted, zero global."""
    rot = np.zeros((skeleton.joint_count, 3))
    for name, angle in _DA_POSE_ANGLES.items():
        if name in skeleton.names:
            rot[skeleton.names.index(name), 2] = angle
    return Pose(rot)


# ---------------------------------------------------------------------------
# Z-buffer joint visibility
# ---------------------------------------------------------------------------


def filter_self_occluded_joints(joints_3d, depth_map, camera, sigma: float) -> np.ndarray:
    """Flag joints visible/occluded against a rendered depth buffer.

    A joint is occluded when its camera depth exceeds the buffered depth at
    its projected pixel by more than `sigma`, or when it projects outside the
    image (or behind the camera).
    """
    check_positive(sigma, "sigma")
    depth = as_array(depth_map, (-1, -1), "depth_map")
    if depth.size == 0:
        raise InvalidInput("depth map is empty")
    joints = as_array(joints_3d, (-1, 3), "joints_3d")

    cam_pts = joints @ camera.rotation.T + camera.translation
    visible = np.zeros(joints.shape[0], dtype=bool)
    H, W = depth.shape
    for i, (x, y, z) in enumerate(cam_pts):
        if z <= 0:
            continue
        px = int(np.floor(camera.fx * x / z + camera.cx))
        py = int(np.floor(camera.fy * y / z + camera.cy))
        if not (0 <= px < W and 0 <= py < H):
            continue
        d = z - depth[py, px]
        visible[i] = d <= sigma
    return visible


# ---------------------------------------------------------------------------
# Default body: 18 joints, capsule limbs
# ---------------------------------------------------------------------------

# name, parent, rest offset (meters, y-up), capsule radius of the bone ending here
_DEFAULT_JOINTS = [
    ("pelvis", -1, (0.0, 0.95, 0.0), 0.0),
    ("spine", 0, (0.0, 0.14, 0.0), 0.105),
    ("chest", 1, (0.0, 0.16, 0.0), 0.105),
    ("neck", 2, (0.0, 0.12, 0.0), 0.045),
    ("head", 3, (0.0, 0.10, 0.0), 0.05),
    ("head_top", 4, (0.0, 0.14, 0.0), 0.085),
    ("l_hip", 0, (0.095, -0.03, 0.0), 0.07),
    ("l_knee", 6, (0.01, -0.40, 0.0), 0.062),
    ("l_ankle", 7, (0.0, -0.41, 0.0), 0.048),
    ("r_hip", 0, (-0.095, -0.03, 0.0), 0.07),
    ("r_knee", 9, (-0.01, -0.40, 0.0), 0.062),
    ("r_ankle", 10, (0.0, -0.41, 0.0), 0.048),
    ("l_shoulder", 2, (0.17, 0.06, 0.0), 0.055),
    ("l_elbow", 12, (0.27, 0.0, 0.0), 0.042),
    ("l_wrist", 13, (0.25, 0.0, 0.0), 0.036),
    ("r_shoulder", 2, (-0.17, 0.06, 0.0), 0.055),
    ("r_elbow", 15, (-0.27, 0.0, 0.0), 0.042),
    ("r_wrist", 16, (-0.25, 0.0, 0.0), 0.036),
]


def default_skeleton(joint_count: int = 18) -> Skeleton:
    """The built-in humanoid. `joint_count` may truncate the tail of the chain list."""
    if not (1 <= joint_count <= len(_DEFAULT_JOINTS)):
        raise InvalidInput(f"joint_count must be in [1, {len(_DEFAULT_JOINTS)}]")
    rows = _DEFAULT_JOINTS[:joint_count]
    return Skeleton(
        parents=np.array([r[1] for r in rows], dtype=np.int64),
        rest_offsets=np.array([r[2] for r in rows], dtype=np.float64),
        bone_scales=np.ones(joint_count),
        names=[r[0] for r in rows],
    )


def bone_list(skeleton: Skeleton) -> list[tuple[int, int, float]]:
    """(parent, child, capsule radius) per bone of the default-style skeleton."""
    radii = {r[0]: r[3] for r in _DEFAULT_JOINTS}
    bones = []
    for k in range(1, skeleton.joint_count):
        r = radii.get(skeleton.names[k], 0.05 * skeleton.bone_scales[k])
        bones.append((int(skeleton.parents[k]), k, float(r) * float(skeleton.bone_scales[k])))
    return bones


def bone_radius_ratios(skeleton: Skeleton) -> dict[int, float]:
    """Capsule radius / bone length per child joint; survives projection roughly."""
    joints = skeleton.rest_joint_positions()
    out = {}
    for p, c, r in bone_list(skeleton):
        length = float(np.linalg.norm(joints[c] - joints[p]))
        out[c] = r / max(length, 1e-9)
    return out


def template_point_cloud(skeleton: Skeleton, spacing: float = 0.048) -> tuple[np.ndarray, np.ndarray]:
    """Sample capsule surfaces around every bone in the rest configuration.

    Returns (points (N, 3), skin_weights (N, K)). Weights sit on the bone's
    parent joint with a ramp toward the child near the far end, which keeps
    limb bends smooth without a learned weight field.
    """
    check_positive(spacing, "spacing")
    joints = skeleton.rest_joint_positions()
    K = skeleton.joint_count
    pts, wts = [], []

    for p, c, radius in bone_list(skeleton):
        a, b = joints[p], joints[c]
        axis = b - a
        length = np.linalg.norm(axis)
        if length < 1e-9:
            continue
        axis = axis / length
        # orthonormal frame around the bone axis
        ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        u = np.cross(axis, ref)
        u /= np.linalg.norm(u)
        v = np.cross(axis, u)

        n_rings = max(2, int(np.ceil(length / spacing)) + 1)
        n_around = max(6, int(np.ceil(2 * np.pi * radius / spacing)))
        for i in range(n_rings):
            s = i / (n_rings - 1)
            center = a + s * length * axis
            phase = (i % 2) * np.pi / n_around  # stagger rings
            for j in range(n_around):
                ang = 2 * np.pi * j / n_around + phase
                pts.append(center + radius * (np.cos(ang) * u + np.sin(ang) * v))
                w = np.zeros(K)
                wc = min(max((s - 0.65) / 0.7, 0.0), 0.5)
                w[c] = wc
                w[p] = 1.0 - wc
                wts.append(w)
        # hemispherical cap at the child end for leaf bones
        if not np.any(skeleton.parents == c):
            for i in range(1, max(2, n_around // 3)):
                t = i / max(2, n_around // 3)
                ring_r = radius * np.cos(t * np.pi / 2)
                h = radius * np.sin(t * np.pi / 2)
                n_cap = max(4, int(np.ceil(2 * np.pi * ring_r / spacing)))
                for j in range(n_cap):
                    ang = 2 * np.pi * j / n_cap
                    pts.append(b + h * axis + ring_r * (np.cos(ang) * u + np.sin(ang) * v))
                    w = np.zeros(K)
                    w[c] = 0.5
                    w[p] = 0.5
                    wts.append(w)

    if not pts:  # single-joint skeleton: a ball around the root
        for ang in np.linspace(0, 2 * np.pi, 12, endpoint=False):
            pts.append(joints[0] + 0.1 * np.array([np.cos(ang), np.sin(ang), 0.0]))
            w = np.zeros(K)
            w[0] = 1.0
            wts.append(w)

    return np.asarray(pts), np.asarray(wts)


def assign_skin_weights(points, template_points, template_weights, k: int = 4) -> np.ndarray:
    """Inverse-distance interpolation of the k nearest template vertices' weights."""
    pts = as_array(points, (-1, 3), "points")
    tpl = as_array(template_points, (-1, 3), "template_points")
    tw = np.asarray(template_weights, dtype=np.float64)
    k = min(k, tpl.shape[0])
    dist, idx = cKDTree(tpl).query(pts, k=k)
    dist = np.atleast_2d(dist.reshape(pts.shape[0], k))
    idx = idx.reshape(pts.shape[0], k)
    inv = 1.0 / (dist + 1e-9)
    inv /= inv.sum(axis=1, keepdims=True)
    w = np.einsum("nk,nkj->nj", inv, tw[idx])
    return w / w.sum(axis=1, keepdims=True)
