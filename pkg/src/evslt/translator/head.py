"""Backbone fusion, temporal reduction and sign embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evslt.errors import ConfigError, TemporalUnderflow, UnknownMode
from evslt.layers import Params, batch_norm_forward, init_batch_norm, init_linear, linear, param
from evslt.numerics import Tensor, ops

AGGREGATIONS = ("concatenate", "add", "multiply", "series")


@dataclass(frozen=True)
class HeadConfig:
    aggregation: str = "series"
    temporal_plan: tuple[tuple[int, int], ...] = ((5, 2), (5, 2))
    d_model: int = 128
    encoder_layers: int = 3
    decoder_layers: int = 3
    heads: int = 4
    ffn_mult: int = 4
    max_len: int = 32

    def __post_init__(self):
        object.__setattr__(self, "temporal_plan", tuple((int(k), int(p)) for k, p in self.temporal_plan))
        if self.aggregation not in AGGREGATIONS:
            raise UnknownMode(f"unknown aggregation {self.aggregation!r}")
        if any(k < 1 or p not in (1, 2) for k, p in self.temporal_plan):
            raise ConfigError(f"bad temporal plan {self.temporal_plan}")
        if min(self.encoder_layers, self.decoder_layers, self.heads, self.ffn_mult) < 1:
            raise ConfigError("layer and head counts must be >= 1")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")

    @property
    def temporal_reduction(self) -> int:
        return int(np.prod([p for _, p in self.temporal_plan])) if self.temporal_plan else 1


def init_head(cfg: HeadConfig, token_dim: int, rng: np.random.Generator, dtype=np.float32) -> Params:
    p: Params = {}
    if cfg.aggregation == "concatenate":
        init_linear(p, "aggregate.proj", 2 * token_dim, token_dim, rng, dtype)
    for i, (k, _) in enumerate(cfg.temporal_plan):
        bound = 1.0 / np.sqrt(k * token_dim)
        p[f"temporal.{i}.conv.weight"] = param(rng.uniform(-bound, bound, (k, token_dim, token_dim)), dtype)
        p[f"temporal.{i}.conv.bias"] = param(np.zeros(token_dim), dtype)
        init_batch_norm(p, f"temporal.{i}.bn", token_dim, dtype)
    init_linear(p, "embed.proj", token_dim, cfg.d_model, rng, dtype)
    init_batch_norm(p, "embed.bn", cfg.d_model, dtype)
    return p


def aggregate(f_s: Tensor, y: Tensor, mode: str, params: Params | None = None) -> Tensor:
    """Combine CNN tokens ``f_s`` with block output ``y`` (same shape)."""
    if mode not in AGGREGATIONS:
        raise UnknownMode(f"unknown aggregation {mode!r}")
    if f_s.shape != y.shape:
        raise ValueError(f"shape mismatch {f_s.shape} vs {y.shape}")
    if mode == "series":
        return y
    if mode == "add":
        return ops.add(f_s, y)
    if mode == "multiply":
        return ops.mul(f_s, y)
    return linear(ops.concat([f_s, y], axis=-1), params, "aggregate.proj")


def temporal_conv(tokens: Tensor, params: Params, plan, mode: str = "eval") -> Tensor:
    """conv1d (same padding) -> BN -> ReLU -> max-pool, per plan entry."""
    need = int(np.prod([p for _, p in plan])) if plan else 1
    if tokens.shape[1] < need:
        raise TemporalUnderflow(f"{tokens.shape[1]} steps cannot be pooled by {need}")
    x = tokens
    for i, (k, pool) in enumerate(plan):
        left = (k - 1) // 2
        x = ops.conv1d_time(x, params[f"temporal.{i}.conv.weight"], left, k - 1 - left)
        x = ops.add(x, params[f"temporal.{i}.conv.bias"])
        x = ops.relu(batch_norm_forward(x, params, f"temporal.{i}.bn", mode, axis=-1))
        if pool > 1:
            x = ops.max_pool_time(x, pool)
    return x


def sign_embed(x: Tensor, params: Params, mode: str = "eval") -> Tensor:
    """linear -> BN -> ReLU into the language model width."""
    h = linear(x, params, "embed.proj")
    return ops.relu(batch_norm_forward(h, params, "embed.bn", mode, axis=-1))
