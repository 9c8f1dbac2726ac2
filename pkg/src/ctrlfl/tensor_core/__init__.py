"""Minimal float64 tensor library: autodiff, Adam, parameter containers."""
from .optim import AdamState, adam_step
from .params import ParamSet, Partition, count_params, tensor_sha256
from .serialize import Frame, deserialize_params, serialize_params
from .tensor import (
    Tensor,
    add,
    backward,
    cross_entropy,
    embedding,
    layer_norm,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax,
    softmax_rows,
    sub,
    topological_order,
    total,
    transpose,
)

__all__ = [
    "AdamState", "Frame", "ParamSet", "Partition", "Tensor", "adam_step", "add", "backward",
    "count_params", "cross_entropy", "deserialize_params", "embedding", "layer_norm", "matmul",
    "mean", "mul", "no_grad", "relu", "reshape", "serialize_params", "softmax", "softmax_rows",
    "sub", "tensor_sha256", "topological_order", "total", "transpose",
]
