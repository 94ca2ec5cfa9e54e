"""Wall-clock scaling of the selective-scan block against self-attention."""

from __future__ import annotations

import statistics
import time
from typing import Callable

import numpy as np

from evslt.config import BenchSection
from evslt.numerics import Tensor
from evslt.ssm import MambaConfig, init_mamba, mamba_block
from evslt.translator.transformer import init_attention, attention


def median_ms(fn: Callable[[], object], trials: int, warmup: int) -> float:
    return interleaved_medians([fn], trials, warmup)[0]


def interleaved_medians(fns: list[Callable[[], object]], trials: int, warmup: int) -> list[float]:
    """Median wall time in ms of each callable.

    Trials alternate between the callables so slow drifts in machine state
    (frequency scaling, background load) hit every size alike.
    """
    for _ in range(warmup):
        for fn in fns:
            fn()
    times: list[list[float]] = [[] for _ in fns]
    for _ in range(trials):
        for fn, acc in zip(fns, times):
            t0 = time.perf_counter()
            fn()
            acc.append((time.perf_counter() - t0) * 1e3)
    return [statistics.median(acc) for acc in times]


def run_bench(cfg: BenchSection, seed: int = 0) -> list[dict]:
    """Rows {component, T, median_ms, ratio}; ratio is time(T) / time(previous T), None for the first."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    mcfg = MambaConfig(d_model=d, d_inner=d, d_state=cfg.d_state)
    mparams = init_mamba(mcfg, rng)
    aparams: dict = {}
    init_attention(aparams, "bench.attn", d, rng, np.float32)
    components = {
        "mamba": lambda x: mamba_block(x, mparams, mcfg),
        "attention": lambda x: attention(x, x, aparams, "bench.attn", heads=1),
    }
    # every (component, T) pair is warmed up and timed in one interleaved loop so
    # allocator and cache state is shared rather than depending on run order
    cases = [(name, T, Tensor(rng.normal(size=(1, T, d)).astype(np.float32)))
             for name in components for T in cfg.lengths]
    medians = interleaved_medians([lambda n=n, x=x: components[n](x) for n, _, x in cases], cfg.trials, cfg.warmup)
    rows, prev = [], {}
    for (name, T, _), ms in zip(cases, medians):
        rows.append({"component": name, "T": T, "median_ms": ms,
                     "ratio": ms / prev[name] if name in prev else None})
        prev[name] = ms
    return rows
