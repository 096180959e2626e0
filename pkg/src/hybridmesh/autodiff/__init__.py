from .core import DiffValue, backward, debug_enabled, set_debug
from .gradcheck import grad_check
from .ops import (
    add, clip, concat, conv2d, conv3d, div, exp, forward_op, gather_rows, index, layer_norm, log,
    matmul, maxpool2d, maxpool3d, mean, mul, relu, reshape, sparse_dense_matmul, sqrt, sub, transpose,
)
from .ops import sum as sum_  # noqa: F401
from .optim import Adam, AdamState, adam_step, lr_at_epoch
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "DiffValue", "backward", "set_debug", "debug_enabled", "grad_check", "forward_op",
    "add", "sub", "mul", "div", "exp", "log", "sqrt", "relu", "clip", "matmul", "sparse_dense_matmul",
    "conv2d", "conv3d", "maxpool2d", "maxpool3d", "layer_norm", "concat", "reshape", "transpose",
    "mean", "sum_", "gather_rows", "index", "Adam", "AdamState", "adam_step", "lr_at_epoch",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
