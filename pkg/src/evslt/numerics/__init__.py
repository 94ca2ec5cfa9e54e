"""Minimal tensor engine: tape autodiff, SGD, cosine schedule, gradient checks."""

from evslt.numerics import ops
from evslt.numerics.checkpoint import load_checkpoint, save_checkpoint
from evslt.numerics.gradcheck import grad_check
from evslt.numerics.optim import OptimizerState, clip_grad_norm, cosine_lr, sgd_step
from evslt.numerics.tensor import Tape, Tensor, active_tape, backward, gradients

__all__ = [
    "OptimizerState", "Tape", "Tensor", "active_tape", "backward", "clip_grad_norm",
    "cosine_lr", "grad_check", "gradients", "load_checkpoint", "ops", "save_checkpoint",
    "sgd_step",
]
