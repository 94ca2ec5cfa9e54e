"""Fusion, temporal reduction, language head and decoding."""

from evslt.translator.head import AGGREGATIONS, HeadConfig, aggregate, sign_embed, temporal_conv
from evslt.translator.model import ModelConfig, forward_full, init_model, translate, visual_features
from evslt.translator.transformer import (
    attention, cross_entropy, decode_teacher_forced, generate, pad_batch,
)
from evslt.vocab import TokenSentence, Vocabulary

__all__ = [
    "AGGREGATIONS", "HeadConfig", "ModelConfig", "TokenSentence", "Vocabulary", "aggregate",
    "attention", "cross_entropy", "decode_teacher_forced", "forward_full", "generate", "init_model",
    "pad_batch", "sign_embed", "temporal_conv", "translate", "visual_features",
]
