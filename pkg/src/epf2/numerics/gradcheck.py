"""Central-difference gradient verification for the autodiff core."""

from __future__ import annotations

import numpy as np

from .tensor import ComputationTape, NumericError, Tensor


def grad_check(f, theta: Tensor, h: float = 1e-5, coords=None) -> float:
    """Compare analytic gradients of scalar `f(theta)` against central differences.

    Returns the max over checked coordinates of
    |analytic - cd| / (|analytic| + |cd| + 1e-12).  `coords` optionally
    restricts the check to a subset of flat indices (full sweep by default).
    """
    theta.zero_grad()
    with ComputationTape() as tape:
        y = f(theta)
        if y.data.size != 1:
            raise ValueError("grad_check requires a scalar-valued function")
        if not np.isfinite(y.data).all():
            raise NumericError("grad_check: non-finite function value")
        tape.backward(y)
    analytic = (np.zeros_like(theta.data) if theta.grad is None else theta.grad).ravel()

    flat = theta.data.ravel()
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(theta).data.reshape(()))
        flat[i] = orig - h
        fm = float(f(theta).data.reshape(()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("grad_check: non-finite function value at perturbed point")
        cd = (fp - fm) / (2.0 * h)
        a = float(analytic[i])
        rel = abs(a - cd) / (abs(a) + abs(cd) + 1e-12)
        worst = max(worst, rel)
    return worst
