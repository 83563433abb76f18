"""Dense-tensor core with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (f32 by default, f64 for gradient
verification).  Operations executed while a ComputationTape is active are
recorded in execution order; the backward pass replays the tape in reverse,
visiting each node exactly once.  Broadcasting is limited to numpy-style
trailing-dimension expansion; gradients of broadcast inputs are reduced back
to the input shape.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class NumericError(ValueError):
    """Raised for numeric-domain failures (non-finite inputs, SPD violations)."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["ComputationTape"] = []


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class ComputationTape:
    """Ordered record of primitive applications for reverse-mode autodiff."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(TapeNode(op, inputs, output, backward))

    def backward(self, loss: "Tensor", seed=None):
        """Accumulate gradients of `loss` into .grad of requiring tensors."""
        if seed is None:
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.data.dtype)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for node in self.nodes:
            tensors[id(node.output)] = node.output
            for t in node.inputs:
                tensors[id(t)] = t
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.backward(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        for key, g in grads.items():
            t = tensors[key]
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Context that suppresses tape recording (inference fast path)."""

    def __enter__(self):
        _TAPE_STACK.append(None)  # type: ignore[arg-type]
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _should_record(*tensors):
    tape = active_tape()
    if tape is None:
        return None
    if any(t.requires_grad for t in tensors):
        return tape
    return None


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- introspection ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _unbroadcast(g, shape):
    """Reduce gradient `g` back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make_out(data, *inputs):
    req = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = req and active_tape() is not None
    out.grad = None
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

PRIMITIVES: dict[str, object] = {}


def _register(name, fn):
    PRIMITIVES[name] = fn
    return fn


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    # stacked-input x 2D-weight products collapse to one flat GEMM, both here
    # and in the backward pass (avoids a per-sample (in, out) gradient stack)
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        data = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        data = np.matmul(ad, bd)
    out = _make_out(data, a, b)
    tape = _should_record(a, b)
    if tape:
        def backward(g):
            if flat:
                g2 = np.ascontiguousarray(g.reshape(-1, g.shape[-1]))
                ga = (g2 @ bd.T).reshape(ad.shape)
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
                return ga, gb
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb

        tape.record("matmul", (a, b), out, backward)
    return out


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make_out(a.data + b.data, a, b)
    tape = _should_record(a, b)
    if tape:
        tape.record("add", (a, b), out,
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make_out(a.data - b.data, a, b)
    tape = _should_record(a, b)
    if tape:
        tape.record("sub", (a, b), out,
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make_out(a.data * b.data, a, b)
    tape = _should_record(a, b)
    if tape:
        ad, bd = a.data, b.data
        tape.record("mul", (a, b), out,
                    lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))
    return out


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make_out(a.data / b.data, a, b)
    tape = _should_record(a, b)
    if tape:
        ad, bd = a.data, b.data
        tape.record("div", (a, b), out,
                    lambda g: (_unbroadcast(g / bd, a.shape),
                               _unbroadcast(-g * ad / (bd * bd), b.shape)))
    return out


def exp(x):
    x = _as_tensor(x)
    data = np.exp(x.data)
    out = _make_out(data, x)
    tape = _should_record(x)
    if tape:
        tape.record("exp", (x,), out, lambda g: (g * data,))
    return out


def log(x):
    x = _as_tensor(x)
    out = _make_out(np.log(x.data), x)
    tape = _should_record(x)
    if tape:
        xd = x.data
        tape.record("log", (x,), out, lambda g: (g / xd,))
    return out


def sqrt(x):
    x = _as_tensor(x)
    data = np.sqrt(x.data)
    out = _make_out(data, x)
    tape = _should_record(x)
    if tape:
        tape.record("sqrt", (x,), out, lambda g: (g * (0.5 / data),))
    return out


def softmax(x, axis=-1):
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    out = _make_out(data, x)
    tape = _should_record(x)
    if tape:
        def backward(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            return ((g - dot) * data,)

        tape.record("softmax", (x,), out, backward)
    return out


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = _make_out(xhat * gain.data + bias.data, x, gain, bias)
    tape = _should_record(x, gain, bias)
    if tape:
        n = x.shape[-1]
        gd = gain.data

        def backward(g):
            red = tuple(range(g.ndim - 1))
            gb = g.sum(axis=red) if red else g
            gg = (g * xhat).sum(axis=red) if red else g * xhat
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            return gx, _unbroadcast(gg, gain.shape), _unbroadcast(gb, bias.shape)

        tape.record("layer_norm", (x, gain, bias), out, backward)
    return out


def gelu(x):
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = _make_out(xd * cdf, x)
    tape = _should_record(x)
    if tape:
        def backward(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
            return (g * (cdf + xd * pdf),)

        tape.record("gelu", (x,), out, backward)
    return out


def softplus(x):
    x = _as_tensor(x)
    xd = x.data
    data = np.where(xd > 20, xd, np.log1p(np.exp(np.minimum(xd, 20.0))))
    out = _make_out(data.astype(xd.dtype), x)
    tape = _should_record(x)
    if tape:
        def backward(g):
            return (g / (1.0 + np.exp(-xd)),)

        tape.record("softplus", (x,), out, backward)
    return out


def clip(x, lo, hi):
    """Clamp with zero gradient outside [lo, hi]."""
    x = _as_tensor(x)
    data = np.clip(x.data, lo, hi)
    out = _make_out(data, x)
    tape = _should_record(x)
    if tape:
        mask = ((x.data >= lo) & (x.data <= hi)).astype(x.dtype)
        tape.record("clip", (x,), out, lambda g: (g * mask,))
    return out


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    out = _make_out(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    tape = _should_record(*tensors)
    if tape:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=axis))

        tape.record("concat", tuple(tensors), out, backward)
    return out


def slice_(x, key):
    x = _as_tensor(x)
    out = _make_out(np.ascontiguousarray(x.data[key]), x)
    tape = _should_record(x)
    if tape:
        shape, dtype = x.shape, x.dtype

        def backward(g):
            gx = np.zeros(shape, dtype=dtype)
            gx[key] += g  # basic indexing only; slices never alias
            return (gx,)

        tape.record("slice", (x,), out, backward)
    return out


def transpose(x, axes):
    x = _as_tensor(x)
    out = _make_out(np.ascontiguousarray(np.transpose(x.data, axes)), x)
    tape = _should_record(x)
    if tape:
        inv = np.argsort(axes)
        tape.record("transpose", (x,), out,
                    lambda g: (np.transpose(g, inv),))
    return out


def reshape(x, shape):
    x = _as_tensor(x)
    out = _make_out(np.ascontiguousarray(x.data.reshape(shape)), x)
    tape = _should_record(x)
    if tape:
        orig = x.shape
        tape.record("reshape", (x,), out, lambda g: (g.reshape(orig),))
    return out


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = _make_out(x.data.mean(axis=axis, keepdims=keepdims), x)
    tape = _should_record(x)
    if tape:
        n = x.data.size if axis is None else np.prod(
            [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        shape = x.shape

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for a in sorted(a % len(shape) for a in axes):
                    g = np.expand_dims(g, a)
            return (np.broadcast_to(g, shape) / n,)

        tape.record("mean", (x,), out, backward)
    return out


def sum_(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    out = _make_out(x.data.sum(axis=axis, keepdims=keepdims), x)
    tape = _should_record(x)
    if tape:
        shape = x.shape

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for a in sorted(a % len(shape) for a in axes):
                    g = np.expand_dims(g, a)
            return (np.broadcast_to(g, shape).copy(),)

        tape.record("sum", (x,), out, backward)
    return out


def scale_grad(x, alpha):
    """Soft detach: forward identity, backward gradient scaled by alpha.

    alpha = 0 is a full stop-gradient, alpha = 1 a plain pass-through.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"scale_grad blend must lie in [0, 1], got {alpha}")
    x = _as_tensor(x)
    out = _make_out(x.data.copy(), x)
    tape = _should_record(x)
    if tape:
        tape.record("scale_grad", (x,), out, lambda g: (g * alpha if alpha != 1.0 else g,))
    return out


for _name, _fn in [
    ("matmul", matmul), ("add", add), ("sub", sub), ("mul", mul), ("div", div),
    ("exp", exp), ("log", log), ("sqrt", sqrt), ("softmax", softmax),
    ("layer_norm", layer_norm), ("gelu", gelu), ("softplus", softplus),
    ("clip", clip), ("concat", concat), ("slice", slice_), ("transpose", transpose),
    ("reshape", reshape), ("mean", mean), ("sum", sum_), ("scale_grad", scale_grad),
]:
    _register(_name, _fn)
