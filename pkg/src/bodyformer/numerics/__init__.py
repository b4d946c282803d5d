"""Float64 tensor core: gradient tape, differentiable ops, rotation and alignment tools."""

from .tensor import (
    CostCollector,
    GradTape,
    NumericError,
    Tensor,
    abs_,
    add,
    avg_pool2d,
    bilinear_patch,
    concat,
    cost_scope,
    cross3,
    div,
    exp,
    gelu,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    reshape,
    softmax_rows,
    softplus,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
    transpose,
)
from .geometry import (
    DegenerateInputError,
    Rotation,
    gram_schmidt_so3,
    procrustes_align,
    random_rotation,
    rodrigues_exp,
    rotation_from_6d,
    so3_log,
)
from .gradcheck import grad_check, grad_check_params, standard_op_checks

__all__ = [
    "CostCollector",
    "DegenerateInputError",
    "GradTape",
    "NumericError",
    "Rotation",
    "Tensor",
    "abs_",
    "add",
    "avg_pool2d",
    "bilinear_patch",
    "concat",
    "cost_scope",
    "cross3",
    "div",
    "exp",
    "gelu",
    "grad_check",
    "grad_check_params",
    "gram_schmidt_so3",
    "layer_norm",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "procrustes_align",
    "random_rotation",
    "reshape",
    "rodrigues_exp",
    "rotation_from_6d",
    "so3_log",
    "softmax_rows",
    "softplus",
    "sqrt",
    "square",
    "standard_op_checks",
    "sub",
    "sum_",
    "tanh",
    "transpose",
]
