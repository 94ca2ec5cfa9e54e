"""Parameter-dict layer helpers shared by the encoder, SSM and translator.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names, the
same names used in checkpoint records. Batch-norm running statistics are
stored alongside as non-trainable tensors.
"""

from __future__ import annotations

import numpy as np

from evslt.numerics import Tensor, ops

Params = dict[str, Tensor]


def param(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def buffer(arr, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=False)


def init_linear(params: Params, name: str, n_in: int, n_out: int, rng, dtype, bias: bool = True) -> None:
    bound = 1.0 / np.sqrt(n_in)
    params[f"{name}.weight"] = param(rng.uniform(-bound, bound, size=(n_in, n_out)), dtype)
    if bias:
        params[f"{name}.bias"] = param(np.zeros(n_out), dtype)


def linear(x: Tensor, params: Params, name: str) -> Tensor:
    y = ops.matmul(x, params[f"{name}.weight"])
    b = params.get(f"{name}.bias")
    return y if b is None else ops.add(y, b)


def init_batch_norm(params: Params, name: str, channels: int, dtype) -> None:
    params[f"{name}.weight"] = param(np.ones(channels), dtype)
    params[f"{name}.bias"] = param(np.zeros(channels), dtype)
    params[f"{name}.running_mean"] = buffer(np.zeros(channels), dtype)
    params[f"{name}.running_var"] = buffer(np.ones(channels), dtype)


def batch_norm_forward(x: Tensor, params: Params, name: str, mode: str = "eval", axis: int = -1) -> Tensor:
    """Batch normalization with learned scale/shift; ``mode`` is "train" or "eval".

    Train mode uses batch statistics and moves the running statistics with
    momentum 0.1; eval mode normalizes with the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return ops.batch_norm(
        x, params[f"{name}.weight"], params[f"{name}.bias"],
        params[f"{name}.running_mean"].data, params[f"{name}.running_var"].data,
        axis=axis, training=mode == "train", momentum=0.1,
    )


def init_layer_norm(params: Params, name: str, dim: int, dtype) -> None:
    params[f"{name}.weight"] = param(np.ones(dim), dtype)
    params[f"{name}.bias"] = param(np.zeros(dim), dtype)


def layer_norm(x: Tensor, params: Params, name: str) -> Tensor:
    return ops.layer_norm(x, params[f"{name}.weight"], params[f"{name}.bias"])


def trainable(params: Params) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if v.requires_grad}
