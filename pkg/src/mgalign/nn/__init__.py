"""Minimal float64 autodiff substrate: tensors, fused ops, layers, Adam."""

from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import NonFiniteError, grad_check
from .layers import LayerNorm, Linear, Module, parameter
from .optim import Adam
from .tensor import ShapeError, Tensor, concat, matmul, no_grad, scatter_rows, stack, tensor, where

__all__ = [
    "Adam", "LayerNorm", "Linear", "Module", "NonFiniteError", "ShapeError", "Tensor",
    "concat", "functional", "grad_check", "load_checkpoint", "matmul", "no_grad",
    "parameter", "save_checkpoint", "scatter_rows", "stack", "tensor", "where",
]
