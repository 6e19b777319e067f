"""Throughput harness: unpruned vs pruned+packed vs pruned+masked encoders.

Times forward plus backward of the training loss on one clip. Pruned runs
include the scorer and the bias injection; the unpruned baseline is the
plain encoder. Only the pipeline call is timed (data is built beforehand).
Speedups are medians of per-repeat ratios from interleaved runs.
"""

from __future__ import annotations

import contextlib
import csv
import os
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .config import PipelineConfig
from .model import STTSModel, forward
from .synthetic import SyntheticVideoSpec, gen_synthetic

BENCH_SCHEMA = "# schema=stts-bench/1"
BENCH_COLUMNS = ["frames", "k", "bins", "unpruned_s", "packed_s", "masked_s", "speedup_packed", "speedup_masked"]
MIN_WARMUP = 3


def bench_config(frames: int = 32, **overrides) -> PipelineConfig:
    """Default benchmark shape: N=64 (32 px, patch 4), D=64, 16 layers, l=3, w=2, 32-bit, mixer head."""
    base = dict(frame_size=32, patch_size=4, frames=frames, dim=64, heads=4, layers=16, layer=3,
                pool_width=2, mode="heuristic", precision="float32", head_mixer=True)
    base.update(overrides)
    return PipelineConfig(**base)


def bench_clip(cfg: PipelineConfig, seed: int = 0, pan_period: int = 4) -> np.ndarray:
    """One synthetic clip whose camera alternates between panning and holding.

    Holds make whole frames redundant and pans make them novel, so pruning
    leaves frames with very different survivor counts.
    """
    margin = cfg.frame_size / 2 - 3 - 1.5
    speed = min(1.2, 0.9 * margin / max(cfg.frames - 1, 1))
    spec = SyntheticVideoSpec(frame_size=cfg.frame_size, patch_size=cfg.patch_size, frames=cfg.frames,
                              sprite_speed=speed, pan_period=pan_period)
    return gen_synthetic(spec, seed).frames[None]


@contextlib.contextmanager
def thread_limit(threads: int | None = None):
    """Cap BLAS threads; defaults to the STTS_THREADS environment variable."""
    if threads is None:
        env = os.environ.get("STTS_THREADS")
        threads = int(env) if env else None
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


def _step(model, frames, labels, **kw) -> int:
    with nx.GradientTape() as tape:
        out = forward(model, frames, labels, **kw)
    nx.backward(tape, out.loss)
    return out.packed.num_bins


def time_interleaved(fns: dict, repeats: int, warmup: int) -> tuple[dict, dict, dict]:
    """Time several callables round-robin so machine drift hits all of them alike.

    Returns per-name sample lists, the last results, and the warmup count used.
    Each callable gets ``warmup`` untimed calls first.
    """
    if warmup < MIN_WARMUP:
        raise ValueError(f"warmup must be at least {MIN_WARMUP}")
    if repeats < 1:
        raise ValueError("repeats must be positive")
    results = {}
    for name, fn in fns.items():
        for _ in range(warmup):
            results[name] = fn()
    samples = {name: [] for name in fns}
    for _ in range(repeats):
        for name, fn in fns.items():
            t0 = time.perf_counter()
            results[name] = fn()
            samples[name].append(time.perf_counter() - t0)
    return samples, results, {name: warmup for name in fns}


@dataclass
class BenchRow:
    frames: int
    k: float
    bins: int
    unpruned_s: float
    packed_s: float
    masked_s: float
    speedup_packed: float
    speedup_masked: float


def run_bench(cfg: PipelineConfig, ks, repeats: int = 5, warmup: int = MIN_WARMUP, seed: int = 0,
              model: STTSModel | None = None, clip: np.ndarray | None = None,
              threads: int | None = None) -> list[BenchRow]:
    model = model or STTSModel(cfg)
    frames = bench_clip(cfg, seed) if clip is None else clip
    labels = np.zeros(frames.shape[0], dtype=np.int64)
    rows = []
    with thread_limit(threads):
        for k in ks:
            samples, results, _ = time_interleaved({
                "unpruned": lambda: _step(model, frames, labels, mode="none", k=0, use_scorer=False),
                "packed": lambda: _step(model, frames, labels, k=k, layout="packed"),
                "masked": lambda: _step(model, frames, labels, k=k, layout="masked"),
            }, repeats, warmup)
            base = samples["unpruned"]
            ratio = {name: statistics.median(b / s for b, s in zip(base, samples[name])) for name in ("packed", "masked")}
            rows.append(BenchRow(cfg.frames, float(k), int(results["packed"]), statistics.median(base),
                                 statistics.median(samples["packed"]), statistics.median(samples["masked"]),
                                 ratio["packed"], ratio["masked"]))
    return rows


def write_bench_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(BENCH_SCHEMA + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            d = asdict(r)
            w.writerow([d["frames"], repr(d["k"]), d["bins"]] + [f"{d[c]:.6g}" for c in BENCH_COLUMNS[3:]])
