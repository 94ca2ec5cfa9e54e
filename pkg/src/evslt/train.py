"""Training loop, checkpoint packing and evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from evslt.config import RunConfig
from evslt.data import Manifest, load_samples
from evslt.errors import DataError, NonFiniteLoss
from evslt.layers import Params
from evslt.metrics import ScoreReport, score_corpus
from evslt.numerics import OptimizerState, Tape, Tensor, clip_grad_norm, cosine_lr, gradients, sgd_step
from evslt.numerics.checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from evslt.translator import ModelConfig, forward_full, init_model, translate
from evslt.vocab import TokenSentence, Vocabulary

LOG_NAME = "train_log.jsonl"
BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"
_OPT = "optim."
_VEL = "optim.velocity."


@dataclass
class TrainResult:
    out_dir: Path
    steps: int
    best_val: float
    log_path: Path


def pack_checkpoint(params: Params, state: OptimizerState | None = None, epoch: int = 0,
                    best: float = math.inf) -> dict[str, np.ndarray]:
    """Model tensors plus, optionally, the optimizer position and momentum buffers."""
    out = {name: t.data for name, t in params.items()}
    if state is not None:
        # counters are stored as float32 scalars; exact below 2**24
        out[_OPT + "step"] = np.array(state.step, dtype=np.float32)
        out[_OPT + "epoch"] = np.array(epoch, dtype=np.float32)
        out[_OPT + "best"] = np.array(best, dtype=np.float32)
        for name, v in state.velocity.items():
            out[_VEL + name] = v
    return out


def restore_params(params: Params, tensors: dict[str, np.ndarray]) -> None:
    """Copy checkpoint values into ``params`` in place; names and shapes must match."""
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise DataError(f"checkpoint lacks {len(missing)} tensor(s), e.g. {missing[0]}")
    for name, t in params.items():
        src = tensors[name]
        if src.shape != t.data.shape:
            raise DataError(f"checkpoint tensor {name} has shape {src.shape}, expected {t.data.shape}")
        t.data[...] = src


def load_model(path, model_cfg: ModelConfig) -> Params:
    params = init_model(model_cfg, 0)
    restore_params(params, load_checkpoint(path))
    return params


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def evaluate_loss(params: Params, model_cfg: ModelConfig, frames: np.ndarray,
                  targets: list[TokenSentence], batch_size: int) -> float:
    """Eval-mode mean of per-batch losses weighted by batch size."""
    total = 0.0
    for i in range(0, len(targets), batch_size):
        _, loss = forward_full(Tensor(frames[i : i + batch_size]), targets[i : i + batch_size], params,
                               model_cfg, "eval")
        total += float(loss.data) * len(targets[i : i + batch_size])
    return total / len(targets)


def train(cfg: RunConfig, manifest: Manifest, out_dir, resume: str | Path | None = None,
          log=None) -> TrainResult:
    """Seeded mini-batch SGD with cosine annealing; writes log and checkpoints to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = manifest.vocabulary()
    model_cfg = cfg.model_config(len(vocab))
    train_recs = manifest.require_split("train")
    x_train, y_train = load_samples(manifest, train_recs, cfg.data, vocab)
    val_recs = manifest.split("val")
    x_val, y_val = load_samples(manifest, val_recs, cfg.data, vocab) if val_recs else (None, [])

    params = init_model(model_cfg, cfg.run.seed)
    names = [k for k, v in params.items() if v.requires_grad]
    steps_per_epoch = math.ceil(len(y_train) / cfg.run.batch_size)
    o = cfg.optim
    state = OptimizerState(lr0=o.lr0, lr_min=o.lr_min, total_steps=cfg.run.epochs * steps_per_epoch,
                           momentum=o.momentum, weight_decay=o.weight_decay)
    start_epoch, best = 0, math.inf
    if resume is not None:
        tensors = load_checkpoint(resume)
        restore_params(params, tensors)
        state.step = int(tensors[_OPT + "step"])
        start_epoch = int(tensors[_OPT + "epoch"])
        best = float(tensors[_OPT + "best"])
        state.velocity = {k[len(_VEL):]: v.copy() for k, v in tensors.items() if k.startswith(_VEL)}

    log_path = out / LOG_NAME
    with open(log_path, "a", encoding="utf-8") as log_file:
        for epoch in range(start_epoch, cfg.run.epochs):
            batches = _batches(len(y_train), cfg.run.batch_size, cfg.run.seed, epoch)
            for bi, idx in enumerate(batches):
                lr = cosine_lr(state)
                with Tape() as tape:
                    _, loss = forward_full(Tensor(x_train[idx]), [y_train[j] for j in idx], params,
                                           model_cfg, "train")
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise NonFiniteLoss(state.step, value)
                    grads = dict(zip(names, gradients(tape, loss, [params[k] for k in names])))
                if o.clip_norm > 0:
                    clip_grad_norm(grads, o.clip_norm)
                record = {"epoch": epoch, "step": state.step, "lr": lr, "train_loss": value, "val_loss": None}
                sgd_step(params, grads, state)
                if bi == len(batches) - 1:
                    if y_val:
                        record["val_loss"] = evaluate_loss(params, model_cfg, x_val, y_val, cfg.run.batch_size)
                    score = record["val_loss"] if record["val_loss"] is not None else value
                    if score < best:
                        best = score
                        save_checkpoint(out / BEST_NAME, pack_checkpoint(params))
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
                if log is not None:
                    log(record)
            if (epoch + 1) % cfg.run.checkpoint_every == 0 or epoch + 1 == cfg.run.epochs:
                save_checkpoint(out / LAST_NAME, pack_checkpoint(params, state, epoch + 1, best))
    return TrainResult(out, state.step, best, log_path)


def evaluate(cfg: RunConfig, manifest: Manifest, checkpoint, split: str, out_dir) -> ScoreReport:
    """Decode every sample of ``split``, write predictions.jsonl and scores.json."""
    records = manifest.require_split(split)
    vocab: Vocabulary = manifest.vocabulary()
    model_cfg = cfg.model_config(len(vocab))
    params = load_model(checkpoint, model_cfg)
    frames, refs = load_samples(manifest, records, cfg.data, vocab)
    hyps: list[TokenSentence] = []
    for i in range(0, len(refs), cfg.run.batch_size):
        hyps.extend(translate(Tensor(frames[i : i + cfg.run.batch_size]), params, model_cfg,
                              strategy=cfg.eval.strategy, beam_size=cfg.eval.beam_size))
    report = score_corpus([h.body for h in hyps], [r.body for r in refs], smooth=cfg.eval.smooth)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump = "".join(json.dumps({"id": rec.id, "reference": rec.text, "hypothesis": vocab.decode(h)}) + "\n"
                   for rec, h in zip(records, hyps))
    atomic_write_bytes(out / f"predictions_{split}.jsonl", dump.encode("utf-8"))
    atomic_write_bytes(out / f"scores_{split}.json", (report.to_json() + "\n").encode("utf-8"))
    return report
