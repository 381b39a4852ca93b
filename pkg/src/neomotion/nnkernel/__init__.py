"""Differentiable NCHW kernels, a small autodiff graph, Adam and checkpoints."""
from . import graph, ops
from .graph import Tensor
from .layers import residual_block
from .params import (AdamConfig, CheckpointError, ModelParams, adam_step, collect_grads,
                     load_checkpoint, save_checkpoint)

__all__ = [
    "AdamConfig", "CheckpointError", "ModelParams", "Tensor", "adam_step", "collect_grads",
    "graph", "load_checkpoint", "ops", "residual_block", "save_checkpoint",
]
