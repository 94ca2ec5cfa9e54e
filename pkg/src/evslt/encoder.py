"""Per-frame residual CNN producing one visual token per frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evslt.errors import ConfigError, SpatialUnderflow
from evslt.layers import Params, batch_norm_forward, init_batch_norm, init_linear, linear, param
from evslt.numerics import Tensor, ops

__all__ = ["EncoderConfig", "init_encoder", "encode_frames", "encoder_features", "batch_norm_forward"]


@dataclass(frozen=True)
class EncoderConfig:
    stages: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))
    token_dim: int = 128
    in_channels: int = 2
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple((int(c), int(s)) for c, s in self.stages))
        if not self.stages:
            raise ConfigError("encoder needs at least one stage")
        if any(s not in (1, 2) or c < 1 for c, s in self.stages):
            raise ConfigError(f"bad encoder stage plan {self.stages}")
        if self.token_dim < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("token_dim must be >= 1 and kernel a positive odd number")

    @property
    def min_size(self) -> int:
        return 2 ** sum(1 for _, s in self.stages if s == 2)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    params: Params = {}
    c_in = cfg.in_channels
    k = cfg.kernel
    for i, (c_out, stride) in enumerate(cfg.stages):
        pre = f"encoder.stage{i}"
        params[f"{pre}.conv1.weight"] = param(rng.normal(0, np.sqrt(2 / (c_in * k * k)), (c_out, c_in, k, k)), dtype)
        init_batch_norm(params, f"{pre}.bn1", c_out, dtype)
        params[f"{pre}.conv2.weight"] = param(rng.normal(0, np.sqrt(2 / (c_out * k * k)), (c_out, c_out, k, k)), dtype)
        init_batch_norm(params, f"{pre}.bn2", c_out, dtype)
        if stride != 1 or c_in != c_out:
            params[f"{pre}.skip.weight"] = param(rng.normal(0, np.sqrt(1 / c_in), (c_out, c_in, 1, 1)), dtype)
        c_in = c_out
    init_linear(params, "encoder.head", c_in, cfg.token_dim, rng, dtype)
    return params


def _stage(x: Tensor, params: Params, pre: str, stride: int, pad: int, mode: str) -> Tensor:
    h = ops.conv2d(x, params[f"{pre}.conv1.weight"], stride=stride, padding=pad)
    h = ops.relu(batch_norm_forward(h, params, f"{pre}.bn1", mode, axis=1))
    h = ops.conv2d(h, params[f"{pre}.conv2.weight"], stride=1, padding=pad)
    h = batch_norm_forward(h, params, f"{pre}.bn2", mode, axis=1)
    skip = params.get(f"{pre}.skip.weight")
    shortcut = x if skip is None else ops.conv2d(x, skip, stride=stride, padding=0)
    return ops.relu(ops.add(h, shortcut))


def encoder_features(frames: Tensor, cfg: EncoderConfig, params: Params, mode: str = "eval") -> Tensor:
    """Globally average-pooled last-stage features, shape (B, T, channels)."""
    b, t, c, h, w = frames.shape
    if c != cfg.in_channels:
        raise ConfigError(f"expected {cfg.in_channels} input channels, got {c}")
    if min(h, w) < cfg.min_size:
        raise SpatialUnderflow(f"{h}x{w} frames too small for {cfg.min_size}x downsampling")
    x = ops.reshape(frames, (b * t, c, h, w))
    for i, (_, stride) in enumerate(cfg.stages):
        x = _stage(x, params, f"encoder.stage{i}", stride, cfg.kernel // 2, mode)
    pooled = ops.mean(x, axis=(2, 3))
    return ops.reshape(pooled, (b, t, pooled.shape[-1]))


def encode_frames(frames: Tensor, cfg: EncoderConfig, params: Params, mode: str = "eval") -> Tensor:
    """(B, T, C, H, W) frames -> (B, T, token_dim) visual tokens."""
    return linear(encoder_features(frames, cfg, params, mode), params, "encoder.head")
