"""Dense tensors with reverse-mode autodiff, plus the optimizer stack."""

import numpy as np

from . import ops
from .autograd import ShapeError, Tensor, is_grad_enabled, no_grad
from .optim import (
    AdamW,
    NonFiniteGradientError,
    OptimizerState,
    PlateauSchedule,
    adamw_update,
    clip_grad_norm,
    clip_gradients,
    global_norm,
)


def value_and_grad(fn, *inputs: Tensor):
    """Evaluate scalar ``fn(*inputs)`` and return it with d/d(input) arrays.

    Inputs are marked as requiring gradients for the duration of the call.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    value = fn(*inputs)
    value.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    return value, grads


__all__ = [
    "AdamW",
    "NonFiniteGradientError",
    "OptimizerState",
    "PlateauSchedule",
    "ShapeError",
    "Tensor",
    "adamw_update",
    "clip_grad_norm",
    "clip_gradients",
    "global_norm",
    "is_grad_enabled",
    "no_grad",
    "ops",
    "value_and_grad",
]
