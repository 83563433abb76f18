"""Parameter containers and the attention building blocks."""

from __future__ import annotations

import numpy as np

from .. import numerics as N
from ..numerics import Tensor


class Module:
    """Minimal parameter registry with recursive traversal."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def param(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr, requires_grad=True)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module"):
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = ""):
        for name, t in self._params.items():
            yield (prefix + name, t)
        for cname, c in self._children.items():
            yield from c.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def load_state(self, state: dict[str, np.ndarray], prefix: str = ""):
        for name, t in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if state[name].shape != t.data.shape:
                raise ValueError(f"parameter {name!r}: shape mismatch "
                                 f"{state[name].shape} vs {t.data.shape}")
            t.data = np.ascontiguousarray(state[name].astype(t.data.dtype))

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters(prefix)}


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype=np.float32, zero_init=False, bias_init=None):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
        b = np.zeros(d_out) if bias_init is None else np.asarray(bias_init, dtype=np.float64)
        self.w = self.param("w", w.astype(dtype))
        self.b = self.param("b", b.astype(dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return N.add(N.matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32):
        super().__init__()
        self.g = self.param("g", np.ones(dim, dtype=dtype))
        self.b = self.param("b", np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return N.layer_norm(x, self.g, self.b)


class MLP(Module):
    """Two-layer GELU MLP."""

    def __init__(self, rng, d_in, d_hidden, d_out, dtype=np.float32,
                 zero_final=False, final_bias=None):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(rng, d_in, d_hidden, dtype))
        self.fc2 = self.child("fc2", Linear(rng, d_hidden, d_out, dtype,
                                            zero_init=zero_final, bias_init=final_bias))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(N.gelu(self.fc1(x)))


# ---------------------------------------------------------------------------
# attention helpers
# ---------------------------------------------------------------------------


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., N, C) -> (..., heads, N, C/heads)"""
    *lead, n, c = x.shape
    x = N.reshape(x, tuple(lead) + (n, heads, c // heads))
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return N.transpose(x, perm)


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, N, d) -> (..., N, heads*d)"""
    *lead, h, n, d = x.shape
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return N.reshape(N.transpose(x, perm), tuple(lead) + (n, h * d))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """q (..., Nq, d), k/v (..., Nk, d); mask additive, broadcastable to scores."""
    d = q.shape[-1]
    kt = N.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = N.mul(N.matmul(q, kt), Tensor(np.asarray(1.0 / np.sqrt(d), dtype=q.dtype)))
    if mask is not None:
        scores = N.add(scores, Tensor(mask.astype(q.dtype)))
    return N.matmul(N.softmax(scores, axis=-1), v)


def sinusoidal_grid_encoding(hp: int, wp: int, channels: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2D sinusoidal positional table over the patch grid, (hp*wp, C)."""
    half = channels // 2
    quarter = max(half // 2, 1)
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(hp), np.arange(wp), indexing="ij")
    out = np.zeros((hp * wp, channels))
    ang_y = ys.ravel()[:, None] * freqs
    ang_x = xs.ravel()[:, None] * freqs
    out[:, 0:quarter] = np.sin(ang_y)
    out[:, quarter:2 * quarter] = np.cos(ang_y)
    out[:, half:half + quarter] = np.sin(ang_x)
    out[:, half + quarter:half + 2 * quarter] = np.cos(ang_x)
    return out.astype(dtype)
