"""End-to-end model: frames -> tokens -> fused tokens -> sentence logits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from evslt.encoder import EncoderConfig, encode_frames, init_encoder
from evslt.errors import ConfigError
from evslt.layers import Params
from evslt.numerics import Tensor
from evslt.ssm import MambaConfig, init_mamba, mamba_block
from evslt.translator.head import HeadConfig, aggregate, init_head, sign_embed, temporal_conv
from evslt.translator.transformer import cross_entropy, decode_teacher_forced, generate, init_transformer


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mamba: MambaConfig = field(default_factory=MambaConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    vocab_size: int = 12

    def __post_init__(self):
        if self.mamba.d_model != self.encoder.token_dim:
            raise ConfigError(f"mamba d_model {self.mamba.d_model} != encoder token_dim {self.encoder.token_dim}")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the 4 reserved ids plus at least one token")


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    params.update(init_encoder(cfg.encoder, rng, dtype))
    params.update(init_mamba(cfg.mamba, rng, dtype))
    params.update(init_head(cfg.head, cfg.encoder.token_dim, rng, dtype))
    params.update(init_transformer(cfg.head, cfg.vocab_size, rng, dtype))
    return params


def visual_features(frames: Tensor, params: Params, cfg: ModelConfig, mode: str = "eval") -> Tensor:
    """(B, T, C, H, W) frames -> (B, T', d_model) sign embeddings."""
    f_s = encode_frames(frames, cfg.encoder, params, mode)
    y = mamba_block(f_s, params, cfg.mamba)
    fused = aggregate(f_s, y, cfg.head.aggregation, params)
    reduced = temporal_conv(fused, params, cfg.head.temporal_plan, mode)
    return sign_embed(reduced, params, mode)


def forward_full(frames: Tensor, targets, params: Params, cfg: ModelConfig,
                 mode: str = "eval") -> tuple[Tensor, Tensor]:
    """Teacher-forced logits and mean cross-entropy; no gloss supervision."""
    visual = visual_features(frames, params, cfg, mode)
    logits, labels, mask = decode_teacher_forced(visual, targets, params, cfg.head)
    return logits, cross_entropy(logits, labels, mask)


def translate(frames: Tensor, params: Params, cfg: ModelConfig, max_len: int | None = None,
              strategy: str = "greedy", beam_size: int = 4):
    return generate(visual_features(frames, params, cfg, "eval"), params, cfg.head,
                    max_len, strategy, beam_size)
