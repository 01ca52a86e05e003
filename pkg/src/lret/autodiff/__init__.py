from .ops import (
    ShapeError,
    add,
    batch_norm,
    bilinear_resize,
    conv2d,
    dense,
    dropout,
    global_avg_pool,
    index,
    leaky_relu,
    max_pool,
    mean,
    mul,
    relu,
    reshape,
    resize_bilinear_array,
    same_padding,
    softmax,
    softmax_cross_entropy,
    sub,
    sum,
)
from .tensor import (
    GraphError,
    Node,
    NonFiniteError,
    Parameter,
    Tensor,
    backward,
    default_dtype,
    no_grad,
    precision,
)

__all__ = [
    "GraphError", "Node", "NonFiniteError", "Parameter", "ShapeError", "Tensor", "add", "backward",
    "batch_norm", "bilinear_resize", "conv2d", "default_dtype", "dense", "dropout", "global_avg_pool",
    "index", "leaky_relu", "max_pool", "mean", "mul", "no_grad", "precision", "relu", "reshape",
    "resize_bilinear_array", "same_padding", "softmax", "softmax_cross_entropy", "sub", "sum",
]
