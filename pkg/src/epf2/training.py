"""Supervised training: adaptive-moment optimizer, cosine learning-rate
schedule with warmup, seeded window sampling, checkpointing, and the
streaming evaluation harness."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as N
from .losses import LossConfig, total_loss
from .metrics import MetricReport, metric_report
from .model import PoseModel, StreamingSession, save_checkpoint
from .numerics import NumericError, read_archive, write_archive


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    sequence_length: int = 16   # frames per sampled window
    lr: float = 3e-4
    lr_min: float = 3e-5
    warmup_frac: float = 0.05
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_interval: int = 500
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.sequence_length < 4:
            raise ValueError("sequence length must be >= 4 (smoothness term "
                             "needs four frames)")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        # keep the loss schedules in sync with the run length
        self.loss.total_steps = self.steps


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive-moment optimizer over a fixed parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        out = {"t": np.asarray([self.t], dtype=np.float64)}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.m[i]
            out[f"v.{i}"] = self.v[i]
        return out

    def load_state(self, state: dict):
        self.t = int(state["t"][0])
        for i in range(len(self.params)):
            self.m[i] = state[f"m.{i}"].astype(self.m[i].dtype)
            self.v[i] = state[f"v.{i}"].astype(self.v[i].dtype)


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def clip_gradients(params, max_norm: float) -> float:
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over the first warmup_frac of training, then cosine
    decay from lr to lr_min."""
    warm = max(1, int(round(cfg.warmup_frac * cfg.steps)))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    frac = (step - warm) / max(1, cfg.steps - warm)
    return cfg.lr_min + (cfg.lr - cfg.lr_min) * 0.5 * (1 + np.cos(np.pi * min(frac, 1.0)))


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------


def batch_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Named per-step random stream; resuming at step s reproduces the exact
    batch sequence of an uninterrupted run."""
    return np.random.default_rng([seed, step, stream])


def sample_batch(records, rng, batch_size: int, length: int):
    """Draws (sequence, start) windows and stacks them into training arrays."""
    images, rots, transs, gtw, gth = [], [], [], [], []
    for _ in range(batch_size):
        rec = records[int(rng.integers(len(records)))]
        if rec.frames < length:
            raise ValueError(f"sequence {rec.seed} shorter than the sampling "
                             f"window ({rec.frames} < {length})")
        s = int(rng.integers(rec.frames - length + 1))
        sl = slice(s, s + length)
        images.append(rec.images[sl])
        rots.append(rec.head_rot[sl])
        transs.append(rec.head_trans[sl])
        gtw.append(rec.keypoints_world[sl])
        gth.append(rec.keypoints_headset()[sl])
    return (np.stack(images), np.stack(rots), np.stack(transs),
            np.stack(gtw), np.stack(gth))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def supervised_step(model: PoseModel, opt: Adam, batch, cams, step: int,
                    cfg: TrainConfig) -> dict:
    """One forward/backward/update; returns the loss breakdown."""
    images, rot, trans, gt_world, gt_headset = batch
    with N.ComputationTape() as tape:
        out = model.forward_sequence(images, rot, trans, cams)
        loss, breakdown = total_loss(out["proposal_world"], out["refined_world"],
                                     out["refined"], gt_world, gt_headset,
                                     out["uncertainty"], step, cfg.loss)
        total = float(loss.data.reshape(()))
        if not np.isfinite(total):
            raise NumericError(f"non-finite loss at step {step}: {breakdown}")
        tape.backward(loss)
    breakdown["total"] = total
    breakdown["grad_norm"] = clip_gradients(opt.params, cfg.grad_clip)
    opt.step(learning_rate(step, cfg))
    opt.zero_grad()
    return breakdown


def train(model: PoseModel, records, cfg: TrainConfig, out_dir=None,
          val_records=None, start_step: int = 0, opt: Adam | None = None,
          log_every: int = 0) -> dict:
    """Supervised loop over sampled windows.  Returns the loss curve, the
    final checkpoint path (when out_dir is given), and the optimizer."""
    labeled = [r for r in records if r.labeled]
    if not labeled:
        raise ValueError("training requires at least one labeled sequence")
    cams = labeled[0].cameras
    if opt is None:
        opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    curve = []
    checkpoint_path = None
    for step in range(start_step, cfg.steps):
        batch = sample_batch(labeled, batch_rng(cfg.seed, step),
                             cfg.batch_size, cfg.sequence_length)
        breakdown = supervised_step(model, opt, batch, cams, step, cfg)
        curve.append((step, breakdown))
        if log_every and step % log_every == 0:
            print(f"step {step:6d}  loss {breakdown['total']:.5f}  "
                  f"lr {learning_rate(step, cfg):.2e}")
        if out_dir and ((step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.steps):
            checkpoint_path = save_train_state(out_dir, model, opt, step + 1)
    if out_dir:
        write_loss_curve(os.path.join(out_dir, "loss_curve.csv"), curve)
    return {"curve": curve, "checkpoint": checkpoint_path, "optimizer": opt}


def save_train_state(out_dir, model: PoseModel, opt: Adam, step: int) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"checkpoint_{step}.epf2")
    save_checkpoint(path, model)
    with open(os.path.join(out_dir, f"optimizer_{step}.epf2"), "wb") as fh:
        write_archive(fh, f"step = {step}\n", opt.state())
    return path


def load_optimizer_state(out_dir, step: int, opt: Adam) -> None:
    with open(os.path.join(out_dir, f"optimizer_{step}.epf2"), "rb") as fh:
        _, tensors = read_archive(fh)
    opt.load_state(tensors)


def write_loss_curve(path, curve) -> None:
    keys = sorted(curve[0][1].keys()) if curve else []
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step," + ",".join(keys) + "\n")
        for step, bd in curve:
            fh.write(f"{step}," + ",".join(f"{bd[k]:.8g}" for k in keys) + "\n")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict_sequence(model: PoseModel, rec, streaming: bool = True) -> dict:
    """Full-sequence inference; streaming uses the per-frame cache path."""
    if streaming:
        session = StreamingSession(model, rec.cameras)
        outs = [session.step(rec.images[t], rec.head_rot[t], rec.head_trans[t])
                for t in range(rec.frames)]
        return {k: np.stack([o[k] for o in outs]) for k in outs[0]}
    with N.no_grad():
        out = model.forward_sequence(rec.images[None], rec.head_rot[None],
                                     rec.head_trans[None], rec.cameras)
    return {"proposal": out["proposal"].data[0], "refined": out["refined"].data[0],
            "refined_world": out["refined_world"].data[0],
            "uncertainty": out["uncertainty"].data[0]}


def evaluate(model: PoseModel, records, streaming: bool = True) -> MetricReport:
    """Per-sequence reports averaged with equal weight."""
    if not records:
        raise ValueError("evaluate: empty record list")
    reports = []
    for rec in records:
        pred = predict_sequence(model, rec, streaming=streaming)
        reports.append(metric_report(pred["refined_world"], rec.keypoints_world,
                                     rec.skeleton))
    mpjpe = float(np.mean([r.mpjpe_cm for r in reports]))
    mpjve = float(np.mean([r.mpjve_cm for r in reports]))
    groups = {}
    for g in reports[0].group_mpjpe_cm:
        groups[g] = float(np.mean([r.group_mpjpe_cm[g] for r in reports]))
    return MetricReport(mpjpe, mpjve, groups)
