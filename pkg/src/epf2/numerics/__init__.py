from .tensor import (
    DEFAULT_DTYPE,
    ComputationTape,
    NumericError,
    PRIMITIVES,
    ShapeError,
    Tensor,
    add,
    clip,
    concat,
    div,
    exp,
    gelu,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    reshape,
    scale_grad,
    slice_,
    softmax,
    softplus,
    sqrt,
    sub,
    sum_,
    transpose,
)
from .gradcheck import grad_check
from .serialize import FormatError, read_archive, read_tensor, write_archive, write_tensor

__all__ = [
    "DEFAULT_DTYPE", "ComputationTape", "NumericError", "PRIMITIVES", "ShapeError",
    "Tensor", "add", "clip", "concat", "div", "exp", "gelu", "layer_norm", "log",
    "matmul", "mean", "mul", "no_grad", "reshape", "scale_grad", "slice_", "softmax",
    "softplus", "sqrt", "sub", "sum_", "transpose", "grad_check", "FormatError",
    "read_archive", "read_tensor", "write_archive", "write_tensor",
]
