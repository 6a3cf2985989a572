"""Minimal reverse-mode automatic differentiation on numpy arrays."""
from . import functional
from .optim import Adam, AdamState, adam_step
from .tensor import GraphError, Tensor, backward, is_grad_enabled, make_node, no_grad

__all__ = [
    "Adam", "AdamState", "GraphError", "Tensor", "adam_step", "backward", "functional",
    "is_grad_enabled", "make_node", "no_grad",
]
