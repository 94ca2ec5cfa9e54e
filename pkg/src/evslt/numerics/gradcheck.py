"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from evslt.numerics.tensor import Tape, Tensor, gradients


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, eps: float) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``param``."""
    data = param.data
    out = np.zeros(data.shape, dtype=np.float64)
    flat = data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f().data)
        flat[i] = orig - eps
        fm = float(f().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
               eps: float = 1e-4) -> float:
    """Maximum relative error between tape gradients and central differences.

    ``f`` maps the parameter list to a scalar Tensor and must be deterministic.
    """
    params = list(params)
    with Tape() as tape:
        loss = f(params)
        analytic = gradients(tape, loss, params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        gn = numeric_gradient(lambda: f(params), p, eps)
        if gn.size:
            worst = max(worst, float(relative_error(ga, gn).max()))
    return worst
