"""Neighbouring-frame cosine targets and the score alignment loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class SimilarityMap:
    sims: Tensor  # (..., T, M); frame-0 row fixed at 1
    targets: np.ndarray  # clip(1 - sims, 0, 1); frame-0 row unused

    @property
    def frame0_row(self) -> np.ndarray:
        return np.zeros(self.targets.shape[-1])


def neighbor_cosine(pooled: Tensor) -> SimilarityMap:
    """Cosine similarity of each pooled block with the same block one frame earlier.

    ``pooled`` is (..., T, M, D). Norms are floored at 1e-12.
    """
    t = pooled.shape[-3]
    unit = nx.l2_normalize(pooled, axis=-1)
    prev_index = np.concatenate([[0], np.arange(t - 1)])
    prev = nx.take(unit, prev_index, axis=unit.ndim - 3)
    sims = nx.sum(nx.mul(unit, prev), axis=-1)
    # frame 0 is compared with itself, so its row is 1 (up to rounding); pin it
    first = np.zeros(sims.shape, dtype=bool)
    first[..., 0, :] = True
    sims = nx.add(nx.mul(sims, (~first).astype(sims.dtype)), first.astype(sims.dtype))
    targets = np.clip(1.0 - sims.data, 0.0, 1.0)
    return SimilarityMap(sims=sims, targets=targets)


def similarity_loss(scores: Tensor, sim: SimilarityMap) -> tuple[np.ndarray, Tensor]:
    """Per-element squared error against the clamped targets, and its mean.

    Frame-0 elements are zero but still count in the denominator, so the mean
    is (w^2 / (T N)) * sum of element losses, averaged over leading batch axes.
    """
    if scores.shape != sim.targets.shape:
        raise nx.ShapeError(f"scores {scores.shape} vs targets {sim.targets.shape}")
    weight = np.ones(scores.shape, dtype=scores.dtype)
    weight[..., 0, :] = 0.0
    diff = nx.mul(nx.sub(scores, Tensor(sim.targets.astype(scores.dtype))), weight)
    per_element = nx.mul(diff, diff)
    return per_element.data.copy(), nx.mean(per_element)


def total_loss(task, sim_mean) -> Tensor:
    """Unweighted sum of the task loss and the scaled similarity loss (either may be None)."""
    parts = [p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
             for p in (task, sim_mean) if p is not None]
    if not parts:
        raise ValueError("total_loss needs at least one term")
    for p in parts:
        if not np.isfinite(p.data).all():
            raise nx.NonFiniteError("loss term is not finite")
    out = parts[0]
    for p in parts[1:]:
        out = nx.add(out, p)
    return out
