"""SGD with momentum and a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from evslt.errors import ShapeMismatch
from evslt.numerics.tensor import Tensor


@dataclass
class OptimizerState:
    lr0: float = 0.01
    lr_min: float = 0.0
    total_steps: int = 1
    step: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_min > self.lr0:
            raise ValueError("lr_min must not exceed lr0")


def cosine_lr(state: OptimizerState) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2, exact at both ends."""
    step = min(state.step, state.total_steps)
    w = 0.5 * (1.0 + math.cos(math.pi * step / state.total_steps))
    return w * state.lr0 + (1.0 - w) * state.lr_min


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
             state: OptimizerState) -> OptimizerState:
    """One momentum-SGD update at the scheduled learning rate, in place.

    v <- momentum * v + g;  p <- p - lr(step) * v;  step += 1
    """
    lr = cosine_lr(state)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        v *= state.momentum
        v += g
        p.data -= (lr * v).astype(p.data.dtype)
    state.step += 1
    return state
