from graphmamba.numerics.optim import AdamState, adam_step
from graphmamba.numerics.tensor import (
    FlopCounter,
    Tape,
    Tensor,
    add,
    concat,
    conv2d,
    dense,
    gather_rows,
    index,
    log_softmax_lastdim,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scaled,
    sigmoid,
    softmax_lastdim,
    sub,
    tanh,
    transpose_last,
    tsum,
)

__all__ = [
    "AdamState",
    "FlopCounter",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "concat",
    "conv2d",
    "dense",
    "gather_rows",
    "index",
    "log_softmax_lastdim",
    "matmul",
    "mean",
    "mul",
    "relu",
    "reshape",
    "scaled",
    "sigmoid",
    "softmax_lastdim",
    "sub",
    "tanh",
    "transpose_last",
    "tsum",
]
