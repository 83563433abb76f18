"""Teacher-student auto-labeling: strong augmentation, pseudo-label
generation and caching, uncertainty distillation, and the mixed
labeled/pseudo-labeled training step."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as N
from .losses import total_loss
from .model import PoseModel, file_hash
from .numerics import NumericError, ShapeError, Tensor, read_archive, write_archive
from .synthdata import SequenceRecord, ValidationError
from .training import (
    Adam,
    TrainConfig,
    batch_rng,
    clip_gradients,
    learning_rate,
    sample_batch,
)


@dataclass
class SSLConfig:
    lambda1: float = 0.5        # pseudo-label loss weight
    lambda2: float = 0.1        # uncertainty-distillation weight
    mix_ratio: int = 1          # unlabeled micro-batches per labeled batch
    noise_sigma_max: float = 0.1
    erase_max_patches: int = 3
    erase_max_area: float = 0.2
    gain_range: tuple = (0.7, 1.3)

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("pseudo-label and distillation weights must be >= 0")
        if self.mix_ratio <= 0:
            raise ValueError("batch mix ratio must be positive")


# ---------------------------------------------------------------------------
# strong augmentation
# ---------------------------------------------------------------------------


def strong_augment(rec: SequenceRecord, seed: int, cfg: SSLConfig | None = None
                   ) -> SequenceRecord:
    """Heavy photometric corruption of the images only: additive noise,
    random rectangle erasure, per-view gain.  Headset poses, cameras, and
    labels are untouched (bit-exact)."""
    cfg = cfg if cfg is not None else SSLConfig()
    rng = np.random.default_rng([seed, rec.seed])
    t, v, h, w = rec.images.shape
    images = rec.images.copy()
    for vi in range(v):
        sigma = rng.uniform(0.0, cfg.noise_sigma_max)
        if sigma > 0:
            images[:, vi] += rng.normal(0.0, sigma, (t, h, w)).astype(np.float32)
        patches = int(rng.integers(1, cfg.erase_max_patches + 1)) \
            if cfg.erase_max_patches > 0 else 0
        for _ in range(patches):
            max_side = np.sqrt(cfg.erase_max_area)
            eh = int(rng.uniform(0.05, max_side) * h)
            ew = int(rng.uniform(0.05, max_side) * w)
            y0 = int(rng.integers(0, max(1, h - eh)))
            x0 = int(rng.integers(0, max(1, w - ew)))
            images[:, vi, y0:y0 + eh, x0:x0 + ew] = 0.0
        gain = rng.uniform(*cfg.gain_range)
        images[:, vi] *= gain
    images = np.clip(images, 0.0, 1.0)
    return replace(rec, images=images)


# ---------------------------------------------------------------------------
# pseudo-labels
# ---------------------------------------------------------------------------


@dataclass
class PseudoLabel:
    """Frozen-teacher predictions for one unlabeled sequence."""

    seq_seed: int
    keypoints_world: np.ndarray   # (T, J, 3)
    uncertainty: np.ndarray       # (T, J, 6) Cholesky parameter vectors
    teacher_hash: str

    def __post_init__(self):
        if self.keypoints_world.shape[:1] != self.uncertainty.shape[:1]:
            raise ValidationError("pseudo-label frame counts disagree")


def generate_pseudo_labels(teacher: PoseModel, rec: SequenceRecord,
                           teacher_hash: str = "") -> PseudoLabel:
    """Full-sequence teacher inference on the CLEAN input.

    Deterministic; the teacher is only read, never written.
    """
    if rec.labeled:
        raise ValidationError("pseudo-labeling expects an unlabeled sequence")
    cfg = teacher.cfg
    if rec.views != cfg.views:
        raise ValueError(f"teacher expects {cfg.views} views, sequence has {rec.views}")
    if rec.images.shape[2:] != (cfg.image_height, cfg.image_width):
        raise ValueError("teacher resolution disagrees with the sequence")
    with N.no_grad():
        out = teacher.forward_sequence(rec.images[None], rec.head_rot[None],
                                       rec.head_trans[None], rec.cameras)
    return PseudoLabel(rec.seed, out["refined_world"].data[0].astype(np.float64),
                       out["uncertainty"].data[0].astype(np.float64),
                       teacher_hash)


def pseudo_label_path(root, split: str, seq_seed: int) -> str:
    return os.path.join(root, split, f"{seq_seed}.pseudo.epf2")


def save_pseudo_label(path, label: PseudoLabel) -> None:
    header = (f"format = pseudo/v1\nseq_seed = {label.seq_seed}\n"
              f"teacher_hash = {label.teacher_hash}\n")
    with open(path, "wb") as fh:
        write_archive(fh, header, {"keypoints_world": label.keypoints_world,
                                   "uncertainty": label.uncertainty})


def load_pseudo_label(path, expect_teacher_hash: str | None = None) -> PseudoLabel:
    with open(path, "rb") as fh:
        header, tensors = read_archive(fh)
    fields = {}
    for line in header.splitlines():
        if "=" in line:
            k, v = [s.strip() for s in line.split("=", 1)]
            fields[k] = v
    label = PseudoLabel(int(fields["seq_seed"]), tensors["keypoints_world"],
                        tensors["uncertainty"], fields.get("teacher_hash", ""))
    if expect_teacher_hash is not None and label.teacher_hash != expect_teacher_hash:
        raise ValidationError(
            f"stale pseudo-labels: cached for teacher {label.teacher_hash[:12]}..., "
            f"current teacher is {expect_teacher_hash[:12]}...")
    return label


def cache_pseudo_labels(teacher: PoseModel, teacher_ckpt_path, root, split: str,
                        records: list) -> list[str]:
    """Writes <seed>.pseudo.epf2 next to each unlabeled sequence."""
    thash = file_hash(teacher_ckpt_path)
    paths = []
    for rec in records:
        label = generate_pseudo_labels(teacher, rec, thash)
        path = pseudo_label_path(root, split, rec.seed)
        save_pseudo_label(path, label)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------


def uncertainty_distillation_loss(u_teacher, u_student: Tensor) -> Tensor:
    """Mean squared error over all 6J Cholesky-parameter components."""
    ut = u_teacher.data if isinstance(u_teacher, Tensor) else np.asarray(u_teacher)
    if tuple(ut.shape) != tuple(u_student.shape):
        raise ShapeError(f"uncertainty shapes disagree: {ut.shape} vs "
                         f"{u_student.shape}")
    d = N.sub(u_student, Tensor(ut.astype(u_student.dtype)))
    return N.mean(N.mul(d, d))


# ---------------------------------------------------------------------------
# mixed training step
# ---------------------------------------------------------------------------


def sample_unlabeled_batch(records, labels: dict, rng, batch_size: int,
                           length: int, aug_cfg: SSLConfig, aug_seed: int):
    """Windows of (augmented input, clean input, pseudo-label targets)."""
    aug_images, clean_images, rots, transs, pw, ph, pu = ([] for _ in range(7))
    for _ in range(batch_size):
        rec = records[int(rng.integers(len(records)))]
        label = labels[rec.seed]
        if label.keypoints_world.shape[0] != rec.frames:
            raise ValidationError(f"pseudo-label length disagrees with sequence "
                                  f"{rec.seed}")
        aug = strong_augment(rec, int(rng.integers(1 << 31)) + aug_seed, aug_cfg)
        s = int(rng.integers(rec.frames - length + 1))
        sl = slice(s, s + length)
        aug_images.append(aug.images[sl])
        clean_images.append(rec.images[sl])
        rots.append(rec.head_rot[sl])
        transs.append(rec.head_trans[sl])
        kw = label.keypoints_world[sl]
        pw.append(kw)
        rel = kw - rec.head_trans[sl][:, None]
        ph.append(np.einsum("tji,tkj->tki", rec.head_rot[sl], rel))
        pu.append(label.uncertainty[sl])
    return (np.stack(aug_images), np.stack(clean_images), np.stack(rots),
            np.stack(transs), np.stack(pw), np.stack(ph), np.stack(pu))


def semi_step(student: PoseModel, opt: Adam, batch_l, batch_u, cams, step: int,
              tcfg: TrainConfig, scfg: SSLConfig) -> dict:
    """One mixed update: supervised loss on the labeled batch plus
    weighted pseudo-label and uncertainty-distillation losses on the
    augmented unlabeled batch.  Only the student is updated."""
    images, rot, trans, gt_world, gt_headset = batch_l
    with N.ComputationTape() as tape:
        out = student.forward_sequence(images, rot, trans, cams)
        loss_l, breakdown = total_loss(out["proposal_world"], out["refined_world"],
                                       out["refined"], gt_world, gt_headset,
                                       out["uncertainty"], step, tcfg.loss)
        loss = loss_l
        breakdown = {f"labeled_{k}": v for k, v in breakdown.items()}
        breakdown["pseudo"] = 0.0
        breakdown["distill"] = 0.0
        if batch_u is not None and (scfg.lambda1 > 0 or scfg.lambda2 > 0):
            (aug_images, _, rot_u, trans_u, pw, ph, pu) = batch_u
            out_u = student.forward_sequence(aug_images, rot_u, trans_u, cams)
            if scfg.lambda1 > 0:
                loss_u, _ = total_loss(out_u["proposal_world"],
                                       out_u["refined_world"], out_u["refined"],
                                       pw, ph, out_u["uncertainty"], step,
                                       tcfg.loss)
                term = N.mul(loss_u, Tensor(np.asarray(scfg.lambda1,
                                                       dtype=loss_u.dtype)))
                loss = N.add(loss, term)
                breakdown["pseudo"] = float(term.data.reshape(()))
            if scfg.lambda2 > 0:
                dist = uncertainty_distillation_loss(pu, out_u["uncertainty"])
                term = N.mul(dist, Tensor(np.asarray(scfg.lambda2,
                                                     dtype=dist.dtype)))
                loss = N.add(loss, term)
                breakdown["distill"] = float(term.data.reshape(()))
        total = float(loss.data.reshape(()))
        if not np.isfinite(total):
            raise NumericError(f"non-finite loss at step {step}: {breakdown}")
        tape.backward(loss)
    breakdown["total"] = total
    breakdown["grad_norm"] = clip_gradients(opt.params, tcfg.grad_clip)
    opt.step(learning_rate(step, tcfg))
    opt.zero_grad()
    return breakdown


def ssl_train(student: PoseModel, labeled_records, unlabeled_records,
              labels: dict, tcfg: TrainConfig, scfg: SSLConfig,
              log_every: int = 0) -> dict:
    """Mixed labeled/pseudo-labeled loop.

    The labeled batch at step k is drawn from the same named random stream
    as supervised training, so the degenerate configuration
    (lambda1 = lambda2 = 0, or an empty unlabeled pool) reproduces the
    supervised parameter trajectory bit-exactly.
    """
    labeled = [r for r in labeled_records if r.labeled]
    if not labeled:
        raise ValueError("SSL training requires labeled sequences")
    cams = labeled[0].cameras
    opt = Adam(student.parameters(), tcfg.beta1, tcfg.beta2, tcfg.eps)
    degenerate = (not unlabeled_records) or (scfg.lambda1 == 0 and scfg.lambda2 == 0)
    curve = []
    for step in range(tcfg.steps):
        batch_l = sample_batch(labeled, batch_rng(tcfg.seed, step),
                               tcfg.batch_size, tcfg.sequence_length)
        batch_u = None
        if not degenerate:
            batch_u = sample_unlabeled_batch(
                unlabeled_records, labels, batch_rng(tcfg.seed, step, stream=1),
                tcfg.batch_size * scfg.mix_ratio, tcfg.sequence_length,
                scfg, aug_seed=tcfg.seed)
        bd = semi_step(student, opt, batch_l, batch_u, cams, step, tcfg, scfg)
        curve.append((step, bd))
        if log_every and step % log_every == 0:
            print(f"ssl step {step:6d}  loss {bd['total']:.5f}")
    return {"curve": curve, "optimizer": opt}
