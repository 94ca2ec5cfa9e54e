"""Manifests, synthetic corpora and the event -> frame preprocessing path."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from evslt.config import SPLITS, DataSection, SynthSection
from evslt.errors import DataError, IoFailure, MissingSplit
from evslt.events import (
    normalize_frames,
    read_events,
    resize_frames,
    stack_to_frames,
    subsample_frames,
    synth_scene,
    write_events,
)
from evslt.vocab import TokenSentence, Vocabulary

MANIFEST_NAME = "manifest.jsonl"
VOCAB_NAME = "vocab.txt"


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    events_path: str
    text: str
    split: str


@dataclass(frozen=True)
class Manifest:
    root: Path
    records: tuple[ManifestRecord, ...]

    def split(self, name: str) -> list[ManifestRecord]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def require_split(self, name: str) -> list[ManifestRecord]:
        recs = self.split(name)
        if not recs:
            raise MissingSplit(f"split {name!r} has no samples")
        return recs

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.load(self.root / VOCAB_NAME)


def load_manifest(path) -> Manifest:
    """Parse and validate a JSON Lines manifest; paths resolve relative to its directory."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    records, seen = [], set()
    for no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            rec = ManifestRecord(str(raw["id"]), str(raw["events_path"]), str(raw["text"]), str(raw["split"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{no}: bad manifest record ({exc})") from exc
        if set(raw) != {"id", "events_path", "text", "split"}:
            raise DataError(f"{path}:{no}: unexpected fields {sorted(set(raw))}")
        if rec.id in seen:
            raise DataError(f"{path}:{no}: duplicate id {rec.id!r}")
        if rec.split not in SPLITS:
            raise DataError(f"{path}:{no}: unknown split {rec.split!r}")
        if not (path.parent / rec.events_path).is_file():
            raise DataError(f"{path}:{no}: missing events file {rec.events_path}")
        seen.add(rec.id)
        records.append(rec)
    return Manifest(path.parent, tuple(records))


def split_counts(n: int, ratios: tuple[float, float, float]) -> dict[str, int]:
    """Floor each non-train share, give the remainder to train."""
    val = int(np.floor(n * ratios[1] + 1e-9))
    test = int(np.floor(n * ratios[2] + 1e-9))
    return {"train": n - val - test, "val": val, "test": test}


def assign_splits(n: int, ratios: tuple[float, float, float]) -> list[str]:
    """Round-robin over train/val/test, skipping splits whose quota is filled."""
    left = split_counts(n, ratios)
    out, k = [], 0
    for _ in range(n):
        while left[SPLITS[k % 3]] == 0:
            k += 1
        name = SPLITS[k % 3]
        left[name] -= 1
        out.append(name)
        k += 1
    return out


def synthesize_corpus(cfg: SynthSection, seed: int, out_dir) -> Manifest:
    """Write events/, vocab.txt and manifest.jsonl for ``cfg.samples`` scenes."""
    out = Path(out_dir)
    vocab = Vocabulary(cfg.vocab)
    splits = assign_splits(cfg.samples, (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio))
    records = []
    try:
        (out / "events").mkdir(parents=True, exist_ok=True)
        vocab.save(out / VOCAB_NAME)
        for i, split in enumerate(splits):
            stream, sentence = synth_scene(seed * 1_000_003 + i, cfg.vocab, (cfg.length_min, cfg.length_max),
                                           geometry=(cfg.sensor_width, cfg.sensor_height))
            rel = f"events/s{i:05d}.evt"
            write_events(stream, out / rel)
            records.append(ManifestRecord(f"s{i:05d}", rel, vocab.decode(sentence), split))
        lines = [json.dumps(r.__dict__, sort_keys=True) for r in records]
        (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write corpus to {out}: {exc}") from exc
    return Manifest(out, tuple(records))


def preprocess(stream, cfg: DataSection, frames: int | None = None) -> np.ndarray:
    """Stack L frames, resize, normalize, then subsample to T frames: (T, 2, H, W) float32."""
    stacked = stack_to_frames(stream, cfg.total_frames, cfg.bin_mode)
    norm = normalize_frames(resize_frames(stacked, cfg.height, cfg.width))
    return subsample_frames(norm, cfg.frames if frames is None else frames).data


def load_samples(manifest: Manifest, records, cfg: DataSection, vocab: Vocabulary,
                 frames: int | None = None) -> tuple[np.ndarray, list[TokenSentence]]:
    """Frames (N, T, 2, H, W) and encoded sentences for the given records."""
    xs, ys = [], []
    for rec in records:
        xs.append(preprocess(read_events(manifest.root / rec.events_path), cfg, frames))
        ys.append(vocab.encode(rec.text))
    return np.stack(xs), ys
