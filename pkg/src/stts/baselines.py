"""Training-free pruning baselines and the foreground-retention metric."""

from __future__ import annotations

import numpy as np

from .aux_loss import SimilarityMap
from .numerics import Tensor
from .packing import RetentionMask, drop_blocks


def heuristic_prune(sim, k: float, w: int, grid: int, protect_first: bool = True) -> RetentionMask:
    """Drop the blocks most similar to the previous frame first.

    ``sim`` is a SimilarityMap or a (T, M) array of similarities.
    """
    sims = sim.sims if isinstance(sim, SimilarityMap) else sim
    arr = sims.data if isinstance(sims, Tensor) else np.asarray(sims)
    return drop_blocks(-arr, k, w, grid, protect_first)


def random_prune(frames: int, patches: int, w: int, k: float, seed: int,
                 protect_first: bool = True) -> RetentionMask:
    """Uniformly sampled blocks, without replacement, up to the same budget."""
    grid = int(round(patches ** 0.5))
    m = (grid // w) ** 2
    rng = np.random.default_rng(seed)
    return drop_blocks(np.zeros((frames, m)), k, w, grid, protect_first,
                       order_key=lambda n: rng.permutation(n))


def foreground_retention(mask, foreground: np.ndarray) -> float:
    """Share of ground-truth foreground patches in frames 1..T-1 that survive."""
    m = np.asarray(getattr(mask, "mask", mask), dtype=bool)
    fg = np.asarray(foreground, dtype=bool)
    if m.shape != fg.shape:
        raise ValueError(f"mask {m.shape} vs foreground {fg.shape}")
    total = int(fg[1:].sum())
    if total == 0:
        return 1.0
    return float((m[1:] & fg[1:]).sum() / total)
