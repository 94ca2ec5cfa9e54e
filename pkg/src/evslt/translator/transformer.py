"""Pre-norm transformer encoder-decoder language head, loss and decoding."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from evslt.layers import Params, init_layer_norm, init_linear, layer_norm, linear, param
from evslt.numerics import Tensor, ops
from evslt.translator.head import HeadConfig
from evslt.vocab import BOS, EOS, PAD, TokenSentence

NEG_INF = -1e9


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table.astype(dtype)


def causal_mask(length: int, dtype=np.float32) -> np.ndarray:
    return np.triu(np.full((length, length), NEG_INF, dtype=dtype), k=1)


def init_attention(p: Params, name: str, d: int, rng, dtype) -> None:
    for proj in ("q", "k", "v", "o"):
        # a key bias only shifts every score in a row by the same amount
        init_linear(p, f"{name}.{proj}", d, d, rng, dtype, bias=proj != "k")


def _init_ffn(p: Params, name: str, d: int, mult: int, rng, dtype) -> None:
    init_linear(p, f"{name}.fc1", d, mult * d, rng, dtype)
    init_linear(p, f"{name}.fc2", mult * d, d, rng, dtype)


def init_transformer(cfg: HeadConfig, vocab_size: int, rng: np.random.Generator, dtype=np.float32) -> Params:
    p: Params = {}
    d = cfg.d_model
    for i in range(cfg.encoder_layers):
        pre = f"lm.enc{i}"
        init_layer_norm(p, f"{pre}.ln1", d, dtype)
        init_attention(p, f"{pre}.attn", d, rng, dtype)
        init_layer_norm(p, f"{pre}.ln2", d, dtype)
        _init_ffn(p, f"{pre}.ffn", d, cfg.ffn_mult, rng, dtype)
    init_layer_norm(p, "lm.enc_norm", d, dtype)
    p["lm.embed"] = param(rng.normal(0, d ** -0.5, (vocab_size, d)), dtype)
    for i in range(cfg.decoder_layers):
        pre = f"lm.dec{i}"
        init_layer_norm(p, f"{pre}.ln1", d, dtype)
        init_attention(p, f"{pre}.self", d, rng, dtype)
        init_layer_norm(p, f"{pre}.ln2", d, dtype)
        init_attention(p, f"{pre}.cross", d, rng, dtype)
        init_layer_norm(p, f"{pre}.ln3", d, dtype)
        _init_ffn(p, f"{pre}.ffn", d, cfg.ffn_mult, rng, dtype)
    init_layer_norm(p, "lm.dec_norm", d, dtype)
    init_linear(p, "lm.out", d, vocab_size, rng, dtype)
    return p


def attention(q_in: Tensor, kv_in: Tensor, params: Params, name: str, heads: int,
              mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention: softmax(QK^T / sqrt(d_head)) V."""
    b, lq, d = q_in.shape
    lk = kv_in.shape[1]
    dh = d // heads

    def split_heads(x: Tensor, length: int) -> Tensor:
        return ops.transpose(ops.reshape(x, (b, length, heads, dh)), (0, 2, 1, 3))

    q = split_heads(linear(q_in, params, f"{name}.q"), lq)
    k = split_heads(linear(kv_in, params, f"{name}.k"), lk)
    v = split_heads(linear(kv_in, params, f"{name}.v"), lk)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = ops.add(scores, mask.astype(scores.dtype))
    ctx = ops.matmul(ops.softmax(scores, axis=-1), v)
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, lq, d))
    return linear(ctx, params, f"{name}.o")


def _ffn(x: Tensor, params: Params, name: str) -> Tensor:
    return linear(ops.relu(linear(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def encode_visual(visual: Tensor, params: Params, cfg: HeadConfig) -> Tensor:
    """Self-attention encoder over visual tokens with sinusoidal positions."""
    x = ops.add(visual, sinusoidal_positions(visual.shape[1], cfg.d_model, visual.dtype))
    for i in range(cfg.encoder_layers):
        pre = f"lm.enc{i}"
        x = ops.add(x, attention(layer_norm(x, params, f"{pre}.ln1"), layer_norm(x, params, f"{pre}.ln1"),
                                 params, f"{pre}.attn", cfg.heads))
        x = ops.add(x, _ffn(layer_norm(x, params, f"{pre}.ln2"), params, f"{pre}.ffn"))
    return layer_norm(x, params, "lm.enc_norm")


def decoder_logits(memory: Tensor, inputs: np.ndarray, params: Params, cfg: HeadConfig) -> Tensor:
    """Logits (B, U, V) for decoder input ids (B, U) attending to ``memory``."""
    u = inputs.shape[1]
    emb = ops.index(params["lm.embed"], inputs)
    y = ops.add(emb, sinusoidal_positions(u, cfg.d_model, emb.dtype))
    mask = causal_mask(u, emb.dtype)
    for i in range(cfg.decoder_layers):
        pre = f"lm.dec{i}"
        h = layer_norm(y, params, f"{pre}.ln1")
        y = ops.add(y, attention(h, h, params, f"{pre}.self", cfg.heads, mask))
        y = ops.add(y, attention(layer_norm(y, params, f"{pre}.ln2"), memory, params, f"{pre}.cross", cfg.heads))
        y = ops.add(y, _ffn(layer_norm(y, params, f"{pre}.ln3"), params, f"{pre}.ffn"))
    return linear(layer_norm(y, params, "lm.dec_norm"), params, "lm.out")


def pad_batch(sentences: Sequence[TokenSentence | Sequence[int]]) -> np.ndarray:
    """Right-pad id sequences with PAD into a (B, L) int array."""
    seqs = [s.ids if isinstance(s, TokenSentence) else tuple(s) for s in sentences]
    out = np.full((len(seqs), max(len(s) for s in seqs)), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def decode_teacher_forced(visual: Tensor, targets, params: Params, cfg: HeadConfig) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Teacher-forced logits for BOS-led targets.

    ``targets`` is a (B, L) PAD-padded id array or a list of sentences. Returns
    (logits of shape (B, L-1, V), next-token labels, non-PAD mask).
    """
    ids = targets if isinstance(targets, np.ndarray) else pad_batch(targets)
    inputs, labels = ids[:, :-1], ids[:, 1:]
    logits = decoder_logits(encode_visual(visual, params, cfg), inputs, params, cfg)
    return logits, labels, labels != PAD


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_mask: np.ndarray | None = None) -> Tensor:
    """Mean over non-PAD positions of -log softmax(logits)[target]."""
    if pad_mask is None:
        pad_mask = targets != PAD
    return ops.cross_entropy(logits, targets, pad_mask)


# ------------------------------------------------------------------ decoding


def _log_probs_last(memory: Tensor, prefix: np.ndarray, params: Params, cfg: HeadConfig) -> np.ndarray:
    logits = decoder_logits(memory, prefix, params, cfg).data[:, -1]
    logits = logits.astype(np.float64)
    logits[:, [PAD, BOS]] = -np.inf  # never generated
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def length_penalty(length: int, alpha: float = 0.6) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def _greedy(memory: Tensor, params: Params, cfg: HeadConfig, max_len: int) -> list[TokenSentence]:
    b = memory.shape[0]
    seqs = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    while seqs.shape[1] < max_len - 1 and not done.all():
        nxt = np.argmax(_log_probs_last(memory, seqs, params, cfg), axis=-1)
        nxt = np.where(done, PAD, nxt)
        done |= nxt == EOS
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    out = []
    for row in seqs:
        body = []
        for tok in row[1:]:
            if tok in (EOS, PAD):
                break
            body.append(int(tok))
        out.append(TokenSentence.from_body(body))
    return out


def _beam(memory: Tensor, params: Params, cfg: HeadConfig, max_len: int, k: int) -> TokenSentence:
    alive: list[tuple[list[int], float]] = [([BOS], 0.0)]
    finished: list[tuple[list[int], float]] = []
    while alive and len(finished) < k:
        if len(alive[0][0]) >= max_len - 1:
            finished.extend((seq + [EOS], lp) for seq, lp in alive)
            break
        prefix = np.array([seq for seq, _ in alive], dtype=np.int64)
        logp = _log_probs_last(Tensor(np.repeat(memory.data, len(alive), axis=0)), prefix, params, cfg)
        cands = []
        for bi, (seq, lp) in enumerate(alive):
            for tok in np.argsort(-logp[bi], kind="stable")[:k]:
                cands.append((seq + [int(tok)], lp + float(logp[bi, tok])))
        cands.sort(key=lambda c: -c[1] / length_penalty(len(c[0]) - 1))
        alive = []
        for seq, lp in cands[:k]:
            (finished if seq[-1] == EOS else alive).append((seq, lp))
    finished.sort(key=lambda c: -c[1] / length_penalty(len(c[0]) - 1))
    return TokenSentence(tuple(finished[0][0]))


def generate(visual: Tensor, params: Params, cfg: HeadConfig, max_len: int | None = None,
             strategy: str = "greedy", beam_size: int = 4) -> list[TokenSentence]:
    """Autoregressive decoding from BOS for each sample in the batch.

    Stops at EOS or when the sentence reaches ``max_len`` ids (EOS is then
    appended). ``strategy`` is "greedy" or "beam".
    """
    max_len = cfg.max_len if max_len is None else max_len
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    memory = encode_visual(visual, params, cfg)
    if strategy == "greedy":
        return _greedy(memory, params, cfg, max_len)
    if strategy == "beam":
        return [_beam(Tensor(memory.data[i : i + 1]), params, cfg, max_len, beam_size)
                for i in range(memory.shape[0])]
    raise ValueError(f"unknown strategy {strategy!r}")
