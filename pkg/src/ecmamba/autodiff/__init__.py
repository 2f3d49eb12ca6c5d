"""Numpy tensors with tape-based reverse-mode differentiation."""

from . import ops
from .gradcheck import gradcheck, numeric_grad
from .tensor import ContractError, Tape, Tensor, active_tape, as_tensor, backward, no_grad, record

__all__ = [
    "ContractError",
    "Tape",
    "Tensor",
    "active_tape",
    "as_tensor",
    "backward",
    "gradcheck",
    "no_grad",
    "numeric_grad",
    "ops",
    "record",
]
