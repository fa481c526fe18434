"""Minimal numpy tensor library with reverse-mode autodiff, layers and AdamW."""

from . import tensor as ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import gradient_check, numeric_grad
from .layers import (Conv2d, Embedding, FeedForward, LayerNorm, Linear, Module,
                     MultiHeadAttention)
from .optim import AdamW, CosineSchedule, clip_grad_norm
from .tensor import (NonFiniteError, ShapeError, Tensor, as_tensor, no_grad, parameter,
                     stop_gradient)

__all__ = [
    "AdamW", "Conv2d", "CosineSchedule", "Embedding", "FeedForward", "LayerNorm", "Linear",
    "Module", "MultiHeadAttention", "NonFiniteError", "ShapeError", "Tensor", "as_tensor",
    "clip_grad_norm", "gradient_check", "load_checkpoint", "no_grad", "numeric_grad", "ops",
    "parameter", "save_checkpoint", "stop_gradient",
]
