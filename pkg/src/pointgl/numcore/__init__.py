from .gradcheck import numerical_grad, relative_error
from .layers import BN_EPS, BN_MOMENTUM, BatchNormState, EmptyBatchError, batchnorm
from .ops import (
    ShapeError,
    add,
    cross_entropy,
    dropout,
    gather_rows,
    group_max,
    linear,
    matmul,
    mul,
    relu,
    reshape,
    scatter_rows,
    softmax_cross_entropy,
    sub,
    sum_all,
)
from .tensor import (
    ContractError,
    Variable,
    as_array,
    backward,
    default_dtype,
    precision,
    set_default_dtype,
)

__all__ = [
    "BN_EPS", "BN_MOMENTUM", "BatchNormState", "ContractError", "EmptyBatchError",
    "ShapeError", "Variable", "add", "as_array", "backward", "batchnorm",
    "cross_entropy", "default_dtype", "dropout", "gather_rows", "group_max",
    "linear", "matmul", "mul", "numerical_grad", "precision", "relative_error",
    "relu", "reshape", "scatter_rows", "set_default_dtype",
    "softmax_cross_entropy", "sub", "sum_all",
]
