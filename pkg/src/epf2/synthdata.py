"""Procedural multi-view motion sequences: sinusoidal joint trajectories,
Gaussian-heatmap view rendering, and dataset persistence."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as R

from . import geometry as G
from .numerics import FormatError, read_archive, write_archive

DEFAULT_FPS = 30.0
HEATMAP_SIGMA = 2.5  # px


class GenerationError(ValueError):
    """Raised when a motion spec drives the body outside the working volume."""


# ---------------------------------------------------------------------------
# motion specification
# ---------------------------------------------------------------------------


@dataclass
class MotionSpec:
    """Sinusoidal angular trajectories for every joint plus a headset path.

    joint_axes (J, 3): unit rotation axis per joint.
    joint_coeffs (J, K, 3): K <= 3 sinusoids per joint as
        (amplitude rad, frequency Hz, phase rad); the joint angle is their sum.
    trans_coeffs (3, K, 3): the same encoding for each world translation axis
        of the headset, added to trans_base.
    yaw_coeffs (K, 3): headset yaw sinusoids (rotation about world y).
    """

    frames: int
    joint_axes: np.ndarray
    joint_coeffs: np.ndarray
    trans_base: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.6, 0.0]))
    trans_coeffs: np.ndarray = field(default_factory=lambda: np.zeros((3, 1, 3)))
    yaw_coeffs: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))
    fps: float = DEFAULT_FPS
    body_scale: float = 1.0
    seed: int = 0
    volume_radius: float = 2.5  # max headset-frame joint distance, meters

    def __post_init__(self):
        self.joint_axes = np.asarray(self.joint_axes, dtype=np.float64)
        self.joint_coeffs = np.asarray(self.joint_coeffs, dtype=np.float64)
        self.trans_base = np.asarray(self.trans_base, dtype=np.float64)
        self.trans_coeffs = np.asarray(self.trans_coeffs, dtype=np.float64)
        self.yaw_coeffs = np.asarray(self.yaw_coeffs, dtype=np.float64)
        if self.frames < 1:
            raise GenerationError("MotionSpec: need at least one frame")
        if self.joint_coeffs.shape[1] > 3:
            raise GenerationError("MotionSpec: at most 3 sinusoids per joint")
        if self.joint_axes.shape != (self.joint_coeffs.shape[0], 3):
            raise GenerationError("MotionSpec: axes and coefficients disagree")


def _eval_sinusoids(coeffs: np.ndarray, t: np.ndarray) -> np.ndarray:
    """coeffs (..., K, 3) of (amp, freq, phase); t (T,) seconds -> (T, ...)."""
    amp, freq, phase = coeffs[..., 0], coeffs[..., 1], coeffs[..., 2]
    ang = 2.0 * np.pi * freq[None] * t.reshape((-1,) + (1,) * amp.ndim) + phase[None]
    return (amp[None] * np.sin(ang)).sum(axis=-1)


def random_motion_spec(skel: G.Skeleton, seed: int, frames: int = 64,
                       fps: float = DEFAULT_FPS, amplitude: float = 0.5,
                       sway: float = 0.15) -> MotionSpec:
    """Randomized but reproducible spec: every array is a pure function of
    the seed."""
    rng = np.random.default_rng(seed)
    j = skel.joint_count
    axes = rng.standard_normal((j, 3))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    coeffs = np.zeros((j, 3, 3))
    coeffs[:, :2, 0] = amplitude * rng.uniform(0.2, 1.0, (j, 2)) / 2
    coeffs[:, :2, 1] = rng.uniform(0.1, 0.8, (j, 2))
    coeffs[:, :2, 2] = rng.uniform(0, 2 * np.pi, (j, 2))
    # slot 2 holds a constant offset: amp * sin(pi/2) with zero frequency
    coeffs[:, 2, 2] = np.pi / 2
    # arms hang down and swing instead of the T-pose default: rotate the
    # shoulders about the forward (z) axis by ~70 degrees
    for name, bias in (("l_shoulder", 1.2), ("r_shoulder", -1.2)):
        if name in skel.names:
            i = skel.names.index(name)
            axes[i] = (0.0, 0.0, 1.0)
            coeffs[i, 2, 0] = bias + rng.uniform(-0.15, 0.15)
    # the root stays put relative to the headset
    coeffs[0, :, 0] = 0.0
    trans = np.zeros((3, 1, 3))
    trans[:, 0, 0] = sway * rng.uniform(0.3, 1.0, 3)
    trans[:, 0, 1] = rng.uniform(0.05, 0.4, 3)
    trans[:, 0, 2] = rng.uniform(0, 2 * np.pi, 3)
    yaw = np.array([[0.4 * rng.uniform(0.2, 1.0), rng.uniform(0.05, 0.3),
                     rng.uniform(0, 2 * np.pi)]])
    return MotionSpec(frames=frames, joint_axes=axes, joint_coeffs=coeffs,
                      trans_coeffs=trans, yaw_coeffs=yaw, fps=fps, seed=seed)


# ---------------------------------------------------------------------------
# motion generation
# ---------------------------------------------------------------------------


@dataclass
class Motion:
    """Generated trajectory: parametric pose and keypoints per frame."""

    pose_params: list          # T x PoseParams
    headset: list              # T x HeadsetPose
    keypoints_headset: np.ndarray  # (T, J, 3)
    keypoints_world: G.KeypointSet  # world frame, (T, J, 3)


def generate_motion(spec: MotionSpec, skel: G.Skeleton) -> Motion:
    """Evaluate the spec into smooth per-frame poses and world keypoints."""
    if spec.joint_axes.shape[0] != skel.joint_count:
        raise GenerationError(
            f"spec covers {spec.joint_axes.shape[0]} joints, skeleton has {skel.joint_count}")
    T = spec.frames
    t = np.arange(T) / spec.fps
    angles = _eval_sinusoids(spec.joint_coeffs, t)        # (T, J)
    rotvec = angles[..., None] * spec.joint_axes[None]    # (T, J, 3)
    mats = R.from_rotvec(rotvec.reshape(-1, 3)).as_matrix().reshape(T, -1, 3, 3)
    rot6 = G.matrix_to_rot6d(mats)                        # (T, J, 6)

    head_trans = spec.trans_base + _eval_sinusoids(spec.trans_coeffs, t)  # (T, 3)
    yaw = _eval_sinusoids(spec.yaw_coeffs, t)             # (T,)
    head_mats = R.from_euler("y", yaw).as_matrix()        # (T, 3, 3)

    ident6 = np.broadcast_to(np.array([1.0, 0, 0, 0, 1.0, 0]), (T, 6)).copy()
    kp_headset = G.forward_kinematics(
        skel, rot6, np.full((T, 1), spec.body_scale), np.zeros((T, 3)), ident6).data

    dist = np.linalg.norm(kp_headset, axis=-1)            # (T, J)
    if (dist > spec.volume_radius).any():
        ti, ji = np.unravel_index(np.argmax(dist), dist.shape)
        raise GenerationError(
            f"joint {skel.names[ji]!r} leaves the working volume at frame {ti} "
            f"({dist[ti, ji]:.2f} m > {spec.volume_radius} m)")

    kp_world = np.einsum("tij,tkj->tki", head_mats, kp_headset) + head_trans[:, None]
    params = [G.PoseParams(rot6[i], spec.body_scale, np.zeros(3), ident6[i])
              for i in range(T)]
    poses = [G.HeadsetPose(head_mats[i], head_trans[i]) for i in range(T)]
    return Motion(params, poses, kp_headset, G.KeypointSet(kp_world, "world"))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def render_views(keypoints: G.KeypointSet, H: G.HeadsetPose, cams,
                 sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    """World keypoints (J, 3) -> (V, height, width) heatmap images in [0, 1].

    Each image is the sum of unit-amplitude isotropic Gaussians at the valid
    projections of all joints; joints behind a camera or outside its frame
    contribute nothing.
    """
    if keypoints.frame != "world":
        raise G.FrameError("render_views expects world-frame keypoints")
    kp_headset = G.to_headset(keypoints, H).positions  # (J, 3)
    images = []
    for cam in cams:
        uv, valid = G.project_points(cam, kp_headset)
        img = np.zeros((cam.height, cam.width))
        if valid.any():
            ys = np.arange(cam.height)[:, None, None]
            xs = np.arange(cam.width)[None, :, None]
            u, v = uv[valid, 0], uv[valid, 1]
            d2 = (xs - u) ** 2 + (ys - v) ** 2
            img = np.exp(-d2 / (2.0 * sigma * sigma)).sum(axis=-1)
        images.append(np.clip(img, 0.0, 1.0))
    return np.stack(images).astype(np.float32)


def default_rig(height: int = 64, width: int = 80) -> list:
    """Four headset-mounted cameras looking down at the wearer's body."""
    cams = []
    # (lateral tilt, forward tilt) per view: two forward-down, two steep-down
    dirs = [(-0.35, 0.25), (0.35, 0.25), (-0.15, -0.1), (0.15, -0.1)]
    offsets = [(-0.06, 0, 0.04), (0.06, 0, 0.04), (-0.04, 0, -0.02), (0.04, 0, -0.02)]
    for (dx, dz), off in zip(dirs, offsets):
        d = np.array([dx, -1.0, dz])
        d /= np.linalg.norm(d)
        rot = _look_rotation(d)
        # mount point expressed in the camera frame: t = -R @ p_mount
        t = -rot @ np.asarray(off, dtype=np.float64)
        cams.append(G.Camera(fx=0.45 * width, fy=0.45 * width, cx=width / 2,
                             cy=height / 2, rotation=rot, translation=t,
                             width=width, height=height))
    return cams


def _look_rotation(direction: np.ndarray) -> np.ndarray:
    """Rotation mapping headset coords to a camera whose optical (z) axis
    points along `direction`; rows are the camera axes."""
    z = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(ref, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


# ---------------------------------------------------------------------------
# sequence records
# ---------------------------------------------------------------------------


class ValidationError(ValueError):
    pass


@dataclass
class SequenceRecord:
    """One multi-view sequence with its rig, headset track, and (optionally)
    ground-truth world keypoints."""

    seed: int
    fps: float
    labeled: bool
    skeleton: G.Skeleton
    cameras: list
    images: np.ndarray          # (T, V, H, W) float32
    head_rot: np.ndarray        # (T, 3, 3) world-from-headset
    head_trans: np.ndarray      # (T, 3)
    keypoints_world: np.ndarray | None  # (T, J, 3), present iff labeled

    def __post_init__(self):
        self.validate()

    @property
    def frames(self) -> int:
        return self.images.shape[0]

    @property
    def views(self) -> int:
        return self.images.shape[1]

    def validate(self):
        if self.images.ndim != 4:
            raise ValidationError("images: expected (frames, views, height, width)")
        t, v, h, w = self.images.shape
        if v != len(self.cameras):
            raise ValidationError(f"images carry {v} views but rig has {len(self.cameras)}")
        for cam in self.cameras:
            if (cam.height, cam.width) != (h, w):
                raise ValidationError("camera resolution disagrees with images")
        if self.head_rot.shape != (t, 3, 3) or self.head_trans.shape != (t, 3):
            raise ValidationError("headset track length disagrees with images")
        if self.labeled:
            if self.keypoints_world is None:
                raise ValidationError("labeled sequence is missing keypoints_world")
            if self.keypoints_world.shape != (t, self.skeleton.joint_count, 3):
                raise ValidationError("keypoints_world shape disagrees with "
                                      "frame or joint count")
        elif self.keypoints_world is not None:
            raise ValidationError("unlabeled sequence must not carry keypoints")

    def headset_pose(self, t: int) -> G.HeadsetPose:
        return G.HeadsetPose(self.head_rot[t], self.head_trans[t])

    def keypoints_headset(self) -> np.ndarray:
        """(T, J, 3) ground truth mapped into the per-frame headset frame."""
        if not self.labeled:
            raise ValidationError("sequence is unlabeled")
        rel = self.keypoints_world - self.head_trans[:, None]
        return np.einsum("tji,tkj->tki", self.head_rot, rel)


def generate_sequence(seed: int, skel: G.Skeleton | None = None, cams=None,
                      frames: int = 64, fps: float = DEFAULT_FPS,
                      labeled: bool = True, amplitude: float = 0.5,
                      spec: MotionSpec | None = None) -> SequenceRecord:
    """Full pipeline: spec -> motion -> rendered views, pure in the seed."""
    skel = skel if skel is not None else G.default_skeleton()
    cams = cams if cams is not None else default_rig()
    if spec is None:
        spec = random_motion_spec(skel, seed, frames=frames, fps=fps,
                                  amplitude=amplitude)
    motion = generate_motion(spec, skel)
    images = np.stack([
        render_views(G.KeypointSet(motion.keypoints_world.positions[t], "world"),
                     motion.headset[t], cams)
        for t in range(spec.frames)
    ])
    head_rot = np.stack([p.rotation for p in motion.headset])
    head_trans = np.stack([p.translation for p in motion.headset])
    return SequenceRecord(
        seed=seed, fps=spec.fps, labeled=labeled, skeleton=skel, cameras=cams,
        images=images, head_rot=head_rot, head_trans=head_trans,
        keypoints_world=motion.keypoints_world.positions if labeled else None)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _camera_to_text(cam: G.Camera) -> str:
    vals = [cam.fx, cam.fy, cam.cx, cam.cy] + list(cam.rotation.ravel()) \
        + list(cam.translation) + [cam.width, cam.height]
    return " ".join(f"{v:.17g}" for v in vals)


def _camera_from_text(line: str) -> G.Camera:
    vals = [float(v) for v in line.split()]
    if len(vals) != 18:
        raise FormatError(f"camera line: expected 18 fields, got {len(vals)}")
    return G.Camera(fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                    rotation=np.array(vals[4:13]).reshape(3, 3),
                    translation=np.array(vals[13:16]),
                    width=int(vals[16]), height=int(vals[17]))


def sequence_header(rec: SequenceRecord) -> str:
    lines = ["format = sequence/v1",
             f"seed = {rec.seed}",
             f"fps = {rec.fps:.17g}",
             f"labeled = {rec.labeled}",
             f"frames = {rec.frames}",
             f"views = {rec.views}",
             "[skeleton]"]
    lines += G.skeleton_to_text(rec.skeleton).strip().splitlines()
    lines.append("[cameras]")
    lines += [_camera_to_text(c) for c in rec.cameras]
    return "\n".join(lines) + "\n"


def parse_sequence_header(text: str):
    fields, skel_lines, cam_lines = {}, [], []
    section = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line == "[skeleton]":
            section = "skeleton"
            continue
        if line == "[cameras]":
            section = "cameras"
            continue
        if section == "skeleton":
            skel_lines.append(line)
        elif section == "cameras":
            cam_lines.append(line)
        elif "=" in line:
            k, v = [s.strip() for s in line.split("=", 1)]
            fields[k] = v
    if fields.get("format") != "sequence/v1":
        raise FormatError(f"unknown sequence format {fields.get('format')!r}")
    skel = G.skeleton_from_text("\n".join(skel_lines))
    cams = [_camera_from_text(l) for l in cam_lines]
    return fields, skel, cams


def save_sequence(path, rec: SequenceRecord) -> None:
    tensors = {
        "images": rec.images.astype(np.float32),
        "head_rot": rec.head_rot.astype(np.float64),
        "head_trans": rec.head_trans.astype(np.float64),
    }
    if rec.labeled:
        tensors["keypoints_world"] = rec.keypoints_world.astype(np.float64)
    with open(path, "wb") as fh:
        write_archive(fh, sequence_header(rec), tensors)


def load_sequence(path) -> SequenceRecord:
    with open(path, "rb") as fh:
        header, tensors = read_archive(fh)
    fields, skel, cams = parse_sequence_header(header)
    labeled = fields["labeled"] == "True"
    kp = tensors.get("keypoints_world")
    if labeled and kp is None:
        raise ValidationError("labeled sequence file is missing keypoints_world")
    if not labeled and kp is not None:
        raise ValidationError("unlabeled sequence file carries keypoints_world")
    rec = SequenceRecord(
        seed=int(fields["seed"]), fps=float(fields["fps"]), labeled=labeled,
        skeleton=skel, cameras=cams, images=tensors["images"],
        head_rot=tensors["head_rot"], head_trans=tensors["head_trans"],
        keypoints_world=kp)
    if rec.frames != int(fields["frames"]) or rec.views != int(fields["views"]):
        raise ValidationError("header frame/view counts disagree with payload")
    return rec


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def save_dataset(root, split: str, records: list) -> None:
    """Writes <root>/<split>/<seed>.epf2 plus a manifest of seeds and flags."""
    d = os.path.join(root, split)
    os.makedirs(d, exist_ok=True)
    lines = []
    for rec in records:
        save_sequence(os.path.join(d, f"{rec.seed}.epf2"), rec)
        lines.append(f"{rec.seed} {'labeled' if rec.labeled else 'unlabeled'}")
    with open(os.path.join(d, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(root, split: str) -> list[tuple[int, bool]]:
    path = os.path.join(root, split, "manifest.txt")
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            seed, flag = line.split()
            entries.append((int(seed), flag == "labeled"))
    return entries


def load_dataset(root, split: str) -> list[SequenceRecord]:
    """Loads every sequence in a split; asserts seed-disjoint splits."""
    entries = read_manifest(root, split)
    seeds = {s for s, _ in entries}
    for other in sorted(os.listdir(root)):
        if other == split or not os.path.isdir(os.path.join(root, other)):
            continue
        if not os.path.exists(os.path.join(root, other, "manifest.txt")):
            continue
        overlap = seeds & {s for s, _ in read_manifest(root, other)}
        if overlap:
            raise ValidationError(
                f"splits {split!r} and {other!r} share sequence seeds {sorted(overlap)}")
    records = []
    for seed, labeled in entries:
        rec = load_sequence(os.path.join(root, split, f"{seed}.epf2"))
        if rec.labeled != labeled:
            raise ValidationError(
                f"manifest marks seed {seed} {'labeled' if labeled else 'unlabeled'} "
                f"but the file disagrees")
        records.append(rec)
    return records


def generate_dataset(root, split: str, seeds, labeled: bool = True,
                     frames: int = 64, cams=None, skel=None,
                     amplitude: float = 0.5) -> list[SequenceRecord]:
    records = [generate_sequence(s, skel=skel, cams=cams, frames=frames,
                                 labeled=labeled, amplitude=amplitude)
               for s in seeds]
    save_dataset(root, split, records)
    return records
