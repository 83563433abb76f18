"""Evaluation metrics: per-joint position error and velocity error, with
per-group breakdowns (wrists, shoulders, legs, feet)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import JOINT_GROUPS, Skeleton

M_TO_CM = 100.0


class DegenerateWindowError(ValueError):
    pass


@dataclass
class MetricReport:
    mpjpe_cm: float
    mpjve_cm: float
    group_mpjpe_cm: dict = field(default_factory=dict)

    def as_csv(self) -> str:
        cols = ["overall_mpjpe_cm", "mpjve_cm"] + [f"{g}_mpjpe_cm" for g in self.group_mpjpe_cm]
        vals = [self.mpjpe_cm, self.mpjve_cm] + list(self.group_mpjpe_cm.values())
        return ",".join(cols) + "\n" + ",".join(f"{v:.6f}" for v in vals) + "\n"

    def as_text(self) -> str:
        lines = [f"{'overall MPJPE':<18} {self.mpjpe_cm:8.3f} cm",
                 f"{'MPJVE':<18} {self.mpjve_cm:8.3f} cm/frame"]
        for g, v in self.group_mpjpe_cm.items():
            lines.append(f"{g + ' MPJPE':<18} {v:8.3f} cm")
        return "\n".join(lines)


def mpjpe(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean Euclidean distance over frames and (masked) joints, in cm.

    pred/gt (..., J, 3) in meters; mask is a boolean joint selector.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    dist = np.linalg.norm(pred - gt, axis=-1)  # (..., J)
    if mask is not None:
        if not mask.any():
            raise ValueError("empty joint mask")
        dist = dist[..., mask]
    return float(dist.mean() * M_TO_CM)


def mpjve(pred: np.ndarray, gt: np.ndarray, time_axis: int = 0) -> float:
    """Mean per-joint velocity error in cm/frame, from first-order forward
    differences along `time_axis`."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape[time_axis] < 2:
        raise DegenerateWindowError("velocity error needs at least 2 frames")
    vp = np.diff(pred, axis=time_axis)
    vg = np.diff(gt, axis=time_axis)
    err = np.linalg.norm(vp - vg, axis=-1)
    return float(err.mean() * M_TO_CM)


def group_masks(skel: Skeleton, groups: dict | None = None) -> dict[str, np.ndarray]:
    groups = JOINT_GROUPS if groups is None else groups
    masks = {}
    for name, joint_names in groups.items():
        mask = np.zeros(skel.joint_count, dtype=bool)
        for jn in joint_names:
            if jn in skel.names:
                mask[skel.names.index(jn)] = True
        if mask.any():  # groups absent from the skeleton are omitted
            masks[name] = mask
    return masks


def metric_report(pred: np.ndarray, gt: np.ndarray, skel: Skeleton | None = None,
                  time_axis: int = 0) -> MetricReport:
    """pred/gt (T, J, 3) world-frame keypoints in meters."""
    report = MetricReport(mpjpe(pred, gt), mpjve(pred, gt, time_axis))
    if skel is not None and skel.joint_count == pred.shape[-2]:
        for name, mask in group_masks(skel).items():
            report.group_mpjpe_cm[name] = mpjpe(pred, gt, mask)
    return report
