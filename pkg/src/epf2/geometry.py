"""Cameras, rigid transforms, rotation representations, forward kinematics,
and rotary positional encoding.

Rotation-producing operations (6D -> matrix, FK) run on autodiff Tensors so
the parametric head stays differentiable end-to-end; data-side helpers accept
plain numpy.  All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as N
from .numerics import Tensor

ROPE_BASE = 10000.0


class ConfigurationError(ValueError):
    pass


class FrameError(ValueError):
    pass


class DegenerateRotationError(ValueError):
    pass


def _check_rotation(r: np.ndarray, what: str):
    if r.shape != (3, 3):
        raise ConfigurationError(f"{what}: rotation must be 3x3, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-5 or abs(np.linalg.det(r) - 1.0) > 1e-5:
        raise ConfigurationError(f"{what}: rotation is not orthonormal with det +1")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera rigidly mounted on the headset.

    `rotation`/`translation` map headset-frame points into the camera frame:
    p_cam = R @ p_headset + t.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(self.rotation, "Camera")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("Camera: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError("Camera: principal point outside the image")


@dataclass
class HeadsetPose:
    """World-from-headset rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(self.rotation, "HeadsetPose")

    def inverse(self) -> "HeadsetPose":
        rt = self.rotation.T
        return HeadsetPose(rt, -rt @ self.translation)


@dataclass
class Skeleton:
    """Topologically sorted joint tree with per-joint rest offsets (meters)."""

    names: list
    parent: np.ndarray
    rest_offset: np.ndarray

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.rest_offset = np.asarray(self.rest_offset, dtype=np.float64)
        j = len(self.names)
        if self.parent.shape != (j,) or self.rest_offset.shape != (j, 3):
            raise ConfigurationError("Skeleton: field shapes disagree with joint count")
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1:
            raise ConfigurationError(f"Skeleton: expected exactly one root, got {len(roots)}")
        for i, p in enumerate(self.parent):
            if p >= i:
                raise ConfigurationError(f"Skeleton: parent of joint {i} does not precede it")

    @property
    def joint_count(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class PoseParams:
    """Parametric body pose: per-joint 6D rotations, global scale, and the
    head-to-headset transform (3D translation + 6D rotation)."""

    joint_rotations: np.ndarray  # (J, 6)
    body_scale: float
    head_translation: np.ndarray  # (3,)
    head_rotation: np.ndarray  # (6,)

    def __post_init__(self):
        if self.body_scale <= 0:
            raise ConfigurationError("PoseParams: body_scale must be positive")


@dataclass
class KeypointSet:
    positions: np.ndarray  # (J, 3) or (T, J, 3)
    frame: str  # "headset" | "world"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.frame not in ("headset", "world"):
            raise FrameError(f"unknown frame tag {self.frame!r}")
        if not np.isfinite(self.positions).all():
            raise ValueError("KeypointSet: non-finite positions")


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def project(cam: Camera, point_headset) -> tuple[np.ndarray, bool]:
    """Pinhole-project a headset-frame point; invalid projections are reported
    at the principal point with the flag False."""
    uv, valid = project_points(cam, np.asarray(point_headset, dtype=np.float64).reshape(1, 3))
    return uv[0], bool(valid[0])


def project_points(cam: Camera, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (..., 3) headset-frame points."""
    pts = np.asarray(pts, dtype=np.float64)
    p_cam = pts @ cam.rotation.T + cam.translation
    z = p_cam[..., 2]
    safe_z = np.where(z > 1e-6, z, 1.0)
    u = cam.fx * p_cam[..., 0] / safe_z + cam.cx
    v = cam.fy * p_cam[..., 1] / safe_z + cam.cy
    valid = (z > 1e-6) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    uv = np.stack([np.where(valid, u, cam.cx), np.where(valid, v, cam.cy)], axis=-1)
    return uv, valid


def project_normalized(cam: Camera, pts: Tensor) -> tuple[Tensor, np.ndarray]:
    """Differentiable projection of (..., 3) headset-frame points, with
    coordinates normalized to [-1, 1] per axis by the image dimensions.

    Invalid projections (behind camera or out of frame) are zeroed out; the
    validity mask is returned as a constant array so gradients only flow
    through valid joints.
    """
    dt = pts.dtype
    p_cam = N.add(N.matmul(pts, Tensor(cam.rotation.T.astype(dt))),
                  Tensor(cam.translation.astype(dt)))
    z = p_cam[..., 2:3]
    _, valid = project_points(cam, pts.data)
    # keep the divide well-defined off the valid set; results there are masked
    safe_z = N.clip(z, 1e-6, np.inf)
    u = N.div(p_cam[..., 0:1], safe_z)
    v = N.div(p_cam[..., 1:2], safe_z)
    # pixel coords -> [-1, 1]: (f*x/z + c) * 2/size - 1
    u = N.add(N.mul(u, Tensor(np.asarray(2.0 * cam.fx / cam.width, dtype=dt))),
              Tensor(np.asarray(2.0 * cam.cx / cam.width - 1.0, dtype=dt)))
    v = N.add(N.mul(v, Tensor(np.asarray(2.0 * cam.fy / cam.height, dtype=dt))),
              Tensor(np.asarray(2.0 * cam.cy / cam.height - 1.0, dtype=dt)))
    uv = N.concat([u, v], axis=-1)
    mask = valid.astype(dt)[..., None]
    return N.mul(uv, Tensor(mask)), valid


def back_project(cam: Camera, uv: np.ndarray, depth: float) -> np.ndarray:
    """Lift a pixel with known camera-frame depth back to the headset frame."""
    x = (uv[0] - cam.cx) / cam.fx * depth
    y = (uv[1] - cam.cy) / cam.fy * depth
    p_cam = np.array([x, y, depth])
    return cam.rotation.T @ (p_cam - cam.translation)


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------


def rot6d_to_matrix(r) -> Tensor:
    """Gram-Schmidt a (..., 6) tensor into (..., 3, 3) rotation matrices.

    Columns are [b1 b2 b3] with b1 = normalize(r[0:3]),
    b2 = normalize(r[3:6] - (b1.r[3:6]) b1), b3 = b1 x b2.
    """
    r = r if isinstance(r, Tensor) else Tensor(np.asarray(r, dtype=np.float64))
    a1, a2 = r[..., 0:3], r[..., 3:6]
    n1 = N.sqrt(N.sum_(N.mul(a1, a1), axis=-1, keepdims=True))
    if np.any(n1.data < 1e-8):
        raise DegenerateRotationError("rot6d: first basis vector has near-zero norm")
    b1 = N.div(a1, n1)
    dot = N.sum_(N.mul(b1, a2), axis=-1, keepdims=True)
    u2 = N.sub(a2, N.mul(dot, b1))
    n2 = N.sqrt(N.sum_(N.mul(u2, u2), axis=-1, keepdims=True))
    if np.any(n2.data < 1e-8):
        raise DegenerateRotationError("rot6d: second basis vector degenerate after projection")
    b2 = N.div(u2, n2)
    b3 = _cross(b1, b2)
    cols = [N.reshape(b, b.shape + (1,)) for b in (b1, b2, b3)]
    return N.concat(cols, axis=-1)


def _cross(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[..., 0:1], a[..., 1:2], a[..., 2:3]
    bx, by, bz = b[..., 0:1], b[..., 1:2], b[..., 2:3]
    return N.concat([
        N.sub(N.mul(ay, bz), N.mul(az, by)),
        N.sub(N.mul(az, bx), N.mul(ax, bz)),
        N.sub(N.mul(ax, by), N.mul(ay, bx)),
    ], axis=-1)


def matrix_to_rot6d(m: np.ndarray) -> np.ndarray:
    """First two columns of a rotation matrix, flattened (the 6D encoding)."""
    m = np.asarray(m)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------


def forward_kinematics(skel: Skeleton, joint_rotations, body_scale,
                       head_translation, head_rotation) -> Tensor:
    """Headset-frame joint positions from parametric pose, batched over any
    leading dims.

    joint_rotations: (..., J, 6); body_scale: (..., 1); head_translation:
    (..., 3); head_rotation: (..., 6).  Returns positions (..., J, 3).
    """
    J = skel.joint_count
    rot = joint_rotations if isinstance(joint_rotations, Tensor) else Tensor(joint_rotations)
    if rot.shape[-2:] != (J, 6):
        raise ConfigurationError(
            f"forward_kinematics: rotations {rot.shape} do not match skeleton with {J} joints")
    scale = body_scale if isinstance(body_scale, Tensor) else Tensor(body_scale)
    t_head = head_translation if isinstance(head_translation, Tensor) else Tensor(head_translation)
    r_head = head_rotation if isinstance(head_rotation, Tensor) else Tensor(head_rotation)
    dt = rot.dtype

    local = rot6d_to_matrix(rot)  # (..., J, 3, 3)
    root_rot = rot6d_to_matrix(r_head)  # (..., 3, 3)

    world_rot: list[Tensor] = [None] * J
    world_pos: list[Tensor] = [None] * J
    for j in range(J):
        lr = local[..., j, :, :]
        off = N.mul(scale, Tensor(skel.rest_offset[j].astype(dt)))  # (..., 3)
        p = int(skel.parent[j])
        if p < 0:
            world_rot[j] = N.matmul(root_rot, lr)
            world_pos[j] = t_head
        else:
            pr, pp = world_rot[p], world_pos[p]
            world_rot[j] = N.matmul(pr, lr)
            step = N.matmul(pr, N.reshape(off, off.shape + (1,)))[..., 0]
            world_pos[j] = N.add(pp, step)
    stacked = [N.reshape(p, p.shape[:-1] + (1, 3)) for p in world_pos]
    return N.concat(stacked, axis=-2)


def fk_pose(skel: Skeleton, params: PoseParams) -> KeypointSet:
    """Non-differentiable convenience wrapper producing a headset-frame KeypointSet."""
    with N.no_grad():
        pos = forward_kinematics(
            skel,
            np.asarray(params.joint_rotations, dtype=np.float64),
            np.asarray([params.body_scale], dtype=np.float64),
            np.asarray(params.head_translation, dtype=np.float64),
            np.asarray(params.head_rotation, dtype=np.float64),
        )
    return KeypointSet(pos.data, "headset")


def to_world(pose: KeypointSet, H: HeadsetPose) -> KeypointSet:
    if pose.frame != "headset":
        raise FrameError(f"to_world expects a headset-frame pose, got {pose.frame!r}")
    return KeypointSet(pose.positions @ H.rotation.T + H.translation, "world")


def to_headset(pose: KeypointSet, H: HeadsetPose) -> KeypointSet:
    if pose.frame != "world":
        raise FrameError(f"to_headset expects a world-frame pose, got {pose.frame!r}")
    inv = H.inverse()
    return KeypointSet(pose.positions @ inv.rotation.T + inv.translation, "headset")


# ---------------------------------------------------------------------------
# Rotary positional encoding
# ---------------------------------------------------------------------------


def rope_frequencies(channels: int, dtype=np.float64) -> np.ndarray:
    if channels % 2 != 0:
        raise ConfigurationError(f"rope: channel count must be even, got {channels}")
    i = np.arange(channels // 2, dtype=np.float64)
    return (ROPE_BASE ** (-2.0 * i / channels)).astype(dtype)


def rope_apply(x, positions) -> Tensor:
    """Rotate channel pairs (x_2i, x_2i+1) of (..., T, C) or (C,) tensors by
    angle position * base^(-2i/C).  Norm-preserving."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    c = x.shape[-1]
    freqs = rope_frequencies(c, dtype=x.dtype)
    pos = np.asarray(positions, dtype=x.dtype)
    ang = pos[..., None] * freqs  # (..., C/2)
    cos, sin = np.cos(ang).astype(x.dtype), np.sin(ang).astype(x.dtype)
    xe, xo = x[..., 0::2], x[..., 1::2]
    ye = N.sub(N.mul(xe, Tensor(cos)), N.mul(xo, Tensor(sin)))
    yo = N.add(N.mul(xe, Tensor(sin)), N.mul(xo, Tensor(cos)))
    pair = N.concat([N.reshape(ye, ye.shape + (1,)), N.reshape(yo, yo.shape + (1,))], axis=-1)
    return N.reshape(pair, x.shape)


# ---------------------------------------------------------------------------
# Skeleton definition and persistence
# ---------------------------------------------------------------------------

# 20-joint body rooted at the head: spine chain down to the pelvis, arms from
# the upper spine, legs from the pelvis.  Offsets in meters, headset frame
# (x right, y up, z forward).
_DEFAULT_JOINTS = [
    ("head", "-", (0.0, 0.0, 0.0)),
    ("neck", "head", (0.0, -0.12, -0.02)),
    ("spine_upper", "neck", (0.0, -0.12, 0.0)),
    ("spine_mid", "spine_upper", (0.0, -0.15, 0.0)),
    ("spine_lower", "spine_mid", (0.0, -0.15, 0.0)),
    ("pelvis", "spine_lower", (0.0, -0.10, 0.0)),
    ("l_shoulder", "spine_upper", (-0.18, 0.0, 0.0)),
    ("l_elbow", "l_shoulder", (-0.26, 0.0, 0.0)),
    ("l_wrist", "l_elbow", (-0.24, 0.0, 0.0)),
    ("r_shoulder", "spine_upper", (0.18, 0.0, 0.0)),
    ("r_elbow", "r_shoulder", (0.26, 0.0, 0.0)),
    ("r_wrist", "r_elbow", (0.24, 0.0, 0.0)),
    ("l_hip", "pelvis", (-0.10, -0.02, 0.0)),
    ("l_knee", "l_hip", (0.0, -0.40, 0.0)),
    ("l_ankle", "l_knee", (0.0, -0.40, 0.0)),
    ("l_foot", "l_ankle", (0.0, -0.05, 0.12)),
    ("r_hip", "pelvis", (0.10, -0.02, 0.0)),
    ("r_knee", "r_hip", (0.0, -0.40, 0.0)),
    ("r_ankle", "r_knee", (0.0, -0.40, 0.0)),
    ("r_foot", "r_ankle", (0.0, -0.05, 0.12)),
]

JOINT_GROUPS = {
    "wrists": ["l_wrist", "r_wrist"],
    "shoulders": ["l_shoulder", "r_shoulder"],
    "legs": ["l_hip", "l_knee", "r_hip", "r_knee"],
    "feet": ["l_ankle", "l_foot", "r_ankle", "r_foot"],
}


def default_skeleton() -> Skeleton:
    names = [n for n, _, _ in _DEFAULT_JOINTS]
    parent = [(-1 if p == "-" else names.index(p)) for _, p, _ in _DEFAULT_JOINTS]
    offsets = np.array([o for _, _, o in _DEFAULT_JOINTS])
    return Skeleton(names, np.array(parent), offsets)


def skeleton_to_text(skel: Skeleton) -> str:
    lines = ["# joint parent dx dy dz"]
    for i, name in enumerate(skel.names):
        p = skel.parent[i]
        pname = "-" if p < 0 else skel.names[p]
        o = skel.rest_offset[i]
        lines.append(f"{name} {pname} {o[0]:.17g} {o[1]:.17g} {o[2]:.17g}")
    return "\n".join(lines) + "\n"


def skeleton_from_text(text: str) -> Skeleton:
    names, parents, offsets = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ConfigurationError(f"skeleton file line {lineno}: expected 5 fields")
        name, pname = parts[0], parts[1]
        if pname == "-":
            parents.append(-1)
        else:
            if pname not in names:
                raise ConfigurationError(
                    f"skeleton file line {lineno}: parent {pname!r} not defined before child")
            parents.append(names.index(pname))
        names.append(name)
        offsets.append([float(v) for v in parts[2:5]])
    return Skeleton(names, np.array(parents), np.array(offsets))


def load_skeleton(path) -> Skeleton:
    with open(path, "r", encoding="utf-8") as fh:
        return skeleton_from_text(fh.read())
