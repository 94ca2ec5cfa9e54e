"""Strict TOML run configuration.

Every section maps onto a dataclass; unknown sections or keys are rejected
before any work starts. ``EVSLT_SEED`` in the environment overrides
``run.seed``.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from evslt.encoder import EncoderConfig
from evslt.errors import ConfigError
from evslt.ssm import MambaConfig
from evslt.translator import HeadConfig, ModelConfig
from evslt.vocab import RESERVED

SEED_ENV = "EVSLT_SEED"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 4
    checkpoint_every: int = 1


@dataclass(frozen=True)
class DataSection:
    total_frames: int = 64  # L, frames stacked per sample
    frames: int = 64  # T fed to the model, uniform subsample of L
    height: int = 32
    width: int = 32
    bin_mode: str = "time"

    def __post_init__(self):
        if self.bin_mode not in ("time", "count"):
            raise ConfigError(f"unknown bin_mode {self.bin_mode!r}")
        if not 1 <= self.frames <= self.total_frames:
            raise ConfigError("need 1 <= data.frames <= data.total_frames")
        if min(self.height, self.width) < 1:
            raise ConfigError("resolution must be positive")


@dataclass(frozen=True)
class SynthSection:
    samples: int = 32
    vocab: tuple[str, ...] = tuple(f"w{i}" for i in range(8))
    length_min: int = 2
    length_max: int = 4
    sensor_width: int = 64
    sensor_height: int = 64
    train_ratio: float = 0.8
    val_ratio: float = 0.1
    test_ratio: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "vocab", tuple(self.vocab))
        if not self.vocab:
            raise ConfigError("synth.vocab must not be empty")
        if len(set(self.vocab)) != len(self.vocab) or set(self.vocab) & set(RESERVED):
            raise ConfigError("synth.vocab entries must be unique and not reserved")
        if any(not tok or tok.split() != [tok] for tok in self.vocab):
            raise ConfigError("synth.vocab entries must be single whitespace-free tokens")
        if not 1 <= self.length_min <= self.length_max:
            raise ConfigError("need 1 <= length_min <= length_max")
        if self.samples < 1:
            raise ConfigError("synth.samples must be >= 1")
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError("split ratios must be non-negative and sum to 1")


@dataclass(frozen=True)
class OptimSection:
    lr0: float = 0.01
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if not 0 <= self.lr_min <= self.lr0:
            raise ConfigError("need 0 <= lr_min <= lr0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")


@dataclass(frozen=True)
class EvalSection:
    strategy: str = "greedy"
    beam_size: int = 4
    smooth: bool = False

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ConfigError(f"unknown decoding strategy {self.strategy!r}")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")


@dataclass(frozen=True)
class BenchSection:
    lengths: tuple[int, ...] = (256, 512)
    d_model: int = 64
    d_state: int = 16
    trials: int = 7
    warmup: int = 2

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(int(t) for t in self.lengths))
        if len(self.lengths) < 2 or any(t < 1 for t in self.lengths):
            raise ConfigError("bench.lengths needs at least two positive lengths")
        if self.trials < 5:
            raise ConfigError("bench.trials must be >= 5")


@dataclass(frozen=True)
class MambaSection:
    d_inner: int = 256
    d_state: int = 16
    conv_width: int = 4
    norm: str = "layer"
    shared_directions: bool = False
    residual: bool = True


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mamba: MambaSection = field(default_factory=MambaSection)
    head: HeadConfig = field(default_factory=HeadConfig)
    optim: OptimSection = field(default_factory=OptimSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)

    @property
    def vocab_size(self) -> int:
        return len(RESERVED) + len(self.synth.vocab)

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        mamba = MambaConfig(d_model=self.encoder.token_dim, **dataclasses.asdict(self.mamba))
        return ModelConfig(self.encoder, mamba, self.head, vocab_size or self.vocab_size)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=seed))


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _check_type(value, default, where: str):
    """Match the kind of the field default; ints are accepted for floats."""
    if default is None:
        return value
    kind = type(default)
    ok = {
        bool: isinstance(value, bool),
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        str: isinstance(value, str),
        tuple: isinstance(value, tuple),
    }.get(kind, True)
    if not ok:
        raise ConfigError(f"{where} must be {kind.__name__}, got {type(value).__name__}")
    return float(value) if kind is float else value


def _build(cls, table: dict[str, Any], where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for key, value in table.items():
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = _check_type(value, _default(known[key]), f"{where}.{key}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def config_from_dict(doc: dict[str, Any], env: dict[str, str] | None = None) -> RunConfig:
    """Validate a parsed TOML document into a RunConfig."""
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(doc) - set(sections))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    built = {}
    for name, f in sections.items():
        if name in doc:
            built[name] = _build(f.default_factory().__class__, doc[name], name)
    cfg = RunConfig(**built)
    try:
        cfg.model_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg = cfg.with_seed(int(env[SEED_ENV]))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    run = cfg.run
    if run.epochs < 1 or run.batch_size < 1 or run.checkpoint_every < 1:
        raise ConfigError("epochs, batch_size and checkpoint_every must be >= 1")
    return cfg


def load_config(path, env: dict[str, str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return config_from_dict(doc, env)
