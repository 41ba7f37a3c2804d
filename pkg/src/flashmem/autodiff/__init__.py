"""Minimal numpy-backed tensors with reverse-mode differentiation."""

from . import ops
from .ops import matmul, softmax_rows
from .optim import AdamW, OptimizerConfig, clip_global_norm, global_grad_norm, learning_rate, optimizer_step
from .tensor import Parameter, Tape, Tensor, backward

__all__ = [
    "AdamW",
    "OptimizerConfig",
    "Parameter",
    "Tape",
    "Tensor",
    "backward",
    "clip_global_norm",
    "global_grad_norm",
    "learning_rate",
    "matmul",
    "ops",
    "optimizer_step",
    "softmax_rows",
]
