"""Tensors, reverse-mode gradients, seeded randomness and a finite-difference oracle."""

from . import ops
from .gradcheck import analytic_grad, finite_diff_check, numeric_grad
from .optim import Adam
from .params import Params
from .rng import Rng
from .tensor import GradMap, NonFiniteError, ShapeError, Tape, Tensor, active_tape, as_tensor

__all__ = [
    "Adam", "GradMap", "NonFiniteError", "Params", "Rng", "ShapeError", "Tape", "Tensor",
    "active_tape", "analytic_grad", "as_tensor", "finite_diff_check", "numeric_grad", "ops",
]
