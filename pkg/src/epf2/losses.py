"""Training objectives: heavy-tailed uncertainty likelihood, jerk smoothness,
the cosine-scheduled MSE/likelihood blend, soft detach, and the combined
position loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as N
from .numerics import Tensor


@dataclass
class LossConfig:
    lambda_pos: float = 1.0
    lambda_jerk: float = 0.8
    nu: float = 3.0              # Student-t tail-heaviness
    dim: int = 3
    wd_start: float = 1.0
    wd_end: float = 0.0
    detach_ramp_frac: float = 0.25
    total_steps: int = 2000

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if self.lambda_pos < 0 or self.lambda_jerk < 0:
            raise ValueError("loss weights must be non-negative")
        if not (0.0 <= self.wd_start <= 1.0 and 0.0 <= self.wd_end <= 1.0):
            raise ValueError("dynamic-weight endpoints must lie in [0, 1]")


LOG_DIAG_LO, LOG_DIAG_HI = -6.0, 4.0


def _as_t(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def tnll_loss(pred: Tensor, gt, u: Tensor, nu: float = 3.0, dim: int = 3) -> Tensor:
    """Student-t negative log likelihood with Cholesky-parameterized
    per-joint covariance: mean over joints of
    (nu+d)/2 * log(1 + m/nu) + 1/2 * log|Sigma|, m = r^T Sigma^-1 r.

    pred/gt (..., J, 3); u (..., J, 6).  The Mahalanobis term is computed by
    forward substitution against the lower-triangular factor, never by an
    explicit inverse.
    """
    dt = pred.dtype
    gt = _as_t(gt, dt)
    r = N.sub(gt, pred)
    lc = N.clip(u[..., 0:3], LOG_DIAG_LO, LOG_DIAG_HI)
    d0, d1, d2 = (N.exp(lc[..., 0:1]), N.exp(lc[..., 1:2]), N.exp(lc[..., 2:3]))
    o0, o1, o2 = u[..., 3:4], u[..., 4:5], u[..., 5:6]
    r0, r1, r2 = r[..., 0:1], r[..., 1:2], r[..., 2:3]
    # forward substitution: L y = r
    y0 = N.div(r0, d0)
    y1 = N.div(N.sub(r1, N.mul(o0, y0)), d1)
    y2 = N.div(N.sub(r2, N.add(N.mul(o1, y0), N.mul(o2, y1))), d2)
    m = N.add(N.mul(y0, y0), N.add(N.mul(y1, y1), N.mul(y2, y2)))
    logdet = N.mul(N.sum_(lc, axis=-1, keepdims=True), Tensor(np.asarray(2.0, dtype=dt)))
    half = Tensor(np.asarray(0.5, dtype=dt))
    scale = Tensor(np.asarray((nu + dim) / 2.0, dtype=dt))
    inv_nu = Tensor(np.asarray(1.0 / nu, dtype=dt))
    tail = N.mul(scale, N.log(N.add(Tensor(np.ones(1, dtype=dt)), N.mul(m, inv_nu))))
    per_joint = N.add(tail, N.mul(half, logdet))
    return N.mean(per_joint)


def jerk_loss(seq: Tensor, time_axis: int = -3) -> Tensor:
    """Mean squared Euclidean norm of the third temporal finite difference.

    seq (..., T, J, 3) with T on `time_axis`.  Each 4-frame window
    contributes p[t+2] - 3 p[t+1] + 3 p[t] - p[t-1], which vanishes exactly
    on trajectories quadratic in time.  Sequences shorter than 4 frames have
    no valid window and contribute 0 (see jerk_window_degenerate).
    """
    t = seq.shape[time_axis]
    if t < 4:
        return Tensor(np.zeros((), dtype=seq.dtype))
    ax = time_axis % seq.ndim

    def frames(lo, hi):
        key = [slice(None)] * seq.ndim
        key[ax] = slice(lo, hi)
        return seq[tuple(key)]

    dt = seq.dtype
    three = Tensor(np.asarray(3.0, dtype=dt))
    jerk = N.add(N.sub(frames(3, t), N.mul(three, frames(2, t - 1))),
                 N.sub(N.mul(three, frames(1, t - 2)), frames(0, t - 3)))
    sq = N.sum_(N.mul(jerk, jerk), axis=-1)  # squared norm per joint
    return N.mean(sq)


def jerk_window_degenerate(frames: int) -> bool:
    """True when a sequence is too short for any third-difference window."""
    return frames < 4


def dynamic_weight(step: int, cfg: LossConfig) -> float:
    """Cosine schedule from wd_start down to wd_end; clamps past total_steps."""
    if step < 0:
        raise ValueError("step must be non-negative")
    s = min(step, cfg.total_steps)
    frac = s / cfg.total_steps
    return cfg.wd_end + (cfg.wd_start - cfg.wd_end) * (1.0 + np.cos(np.pi * frac)) / 2.0


def detach_blend(step: int, cfg: LossConfig) -> float:
    """Soft-detach blend: 0 (full detach) ramping linearly to 1 over the
    first `detach_ramp_frac` of training."""
    ramp = max(1, int(round(cfg.detach_ramp_frac * cfg.total_steps)))
    return min(1.0, step / ramp)


def soft_detach(x: Tensor, alpha: float) -> Tensor:
    """Forward identity; backward gradient scaled by alpha in [0, 1]."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"soft_detach blend must lie in [0, 1], got {alpha}")
    return N.scale_grad(x, alpha)


def mse(pred: Tensor, gt) -> Tensor:
    gt = _as_t(gt, pred.dtype)
    d = N.sub(pred, gt)
    return N.mean(N.mul(d, d))


def total_loss(proposal_world: Tensor, refined_world: Tensor, refined_headset: Tensor,
               gt_world, gt_headset, u: Tensor, step: int,
               cfg: LossConfig) -> tuple[Tensor, dict]:
    """Weighted combination of the position, likelihood, and smoothness terms.

    Returns the scalar loss and a breakdown of the weighted contributions,
    which sum exactly to the total.
    """
    dt = refined_world.dtype
    wd = dynamic_weight(step, cfg)
    alpha = detach_blend(step, cfg)

    mse_r = mse(refined_world, gt_world)
    mse_p = mse(proposal_world, gt_world)
    tnll = tnll_loss(soft_detach(refined_headset, alpha), gt_headset, u, cfg.nu, cfg.dim)
    jerk_r = jerk_loss(refined_world)
    jerk_p = jerk_loss(proposal_world)

    def weigh(term, w):
        return N.mul(term, Tensor(np.asarray(w, dtype=dt)))

    terms = {
        "mse_refined": weigh(mse_r, cfg.lambda_pos * wd),
        "tnll": weigh(tnll, cfg.lambda_pos * (1.0 - wd)),
        "mse_proposal": weigh(mse_p, cfg.lambda_pos),
        "jerk_refined": weigh(jerk_r, cfg.lambda_jerk),
        "jerk_proposal": weigh(jerk_p, cfg.lambda_jerk),
    }
    total = None
    for term in terms.values():
        total = term if total is None else N.add(total, term)
    breakdown = {k: float(v.data.reshape(())) for k, v in terms.items()}
    breakdown["dynamic_weight"] = wd
    breakdown["detach_blend"] = alpha
    return total, breakdown
