"""Budgeted block pruning and first-fit-descending token packing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import numerics as nx
from .encoder import block_index
from .numerics import Tensor


class PackingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Retention
# --------------------------------------------------------------------------


@dataclass
class RetentionMask:
    mask: np.ndarray  # (T, N) bool
    block_mask: np.ndarray  # (T, M) bool
    budget: int
    capped: bool = False  # budget unreachable without touching frame 0

    @property
    def retained_count(self) -> int:
        return int(self.mask.sum())

    @property
    def achieved_ratio(self) -> float:
        """Fraction of tokens actually pruned."""
        return 1.0 - self.retained_count / self.mask.size

    def dump(self) -> str:
        """One line of '0'/'1' per frame."""
        return "".join("".join("1" if v else "0" for v in row) + "\n" for row in self.mask)


def token_budget(frames: int, patches: int, k: float) -> int:
    """ceil((1 - k/100) * T * N), exact for decimal k."""
    if not 0 <= k <= 100:
        raise ValueError(f"prune ratio {k} outside [0, 100]")
    keep = (100 - Fraction(str(k))) * frames * patches / 100
    return math.ceil(keep)


def drop_blocks(priority: np.ndarray, k: float, w: int, grid: int, protect_first: bool,
                 order_key=None) -> RetentionMask:
    """Drop whole blocks in ascending ``priority`` until the token budget holds.

    Ties go to (frame index, block index) ascending.  ``order_key`` may supply
    a precomputed candidate order (used by random pruning).
    """
    priority = np.asarray(priority, dtype=np.float64)
    t, m = priority.shape
    n = grid * grid
    if m * w * w != n:
        raise ValueError(f"{m} pooled blocks of {w}x{w} do not tile {n} patches")
    budget = token_budget(t, n, k)
    per_block = w * w
    need = -(-(t * n - budget) // per_block)
    frames, blocks = np.meshgrid(np.arange(t), np.arange(m), indexing="ij")
    cand = np.ones((t, m), dtype=bool)
    if protect_first:
        cand[0] = False
    cf, cb = frames[cand], blocks[cand]
    if order_key is None:
        order = np.lexsort((cb, cf, priority[cand]))
    else:
        order = order_key(cf.size)
    capped = need > cf.size
    drop = order[: min(need, cf.size)]
    block_mask = np.ones((t, m), dtype=bool)
    block_mask[cf[drop], cb[drop]] = False
    mask = block_mask[:, block_index(grid, w)]
    return RetentionMask(mask=mask, block_mask=block_mask, budget=budget, capped=bool(capped))


def select_retention(scores, k: float, w: int, grid: int, protect_first: bool = True) -> RetentionMask:
    """Keep the highest-scoring pooled blocks of one video within the (1 - k%) budget.

    ``scores`` is a (T, M) array of pooled scores (or a ScoreMap for a single video).
    """
    pooled = getattr(scores, "pooled", scores)
    arr = pooled.data if isinstance(pooled, Tensor) else np.asarray(pooled)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    return drop_blocks(arr, k, w, grid, protect_first)


# --------------------------------------------------------------------------
# First-fit descending
# --------------------------------------------------------------------------


def find_first_fit(count: int, loads, capacity: int) -> int:
    """Smallest bin index whose load leaves room for ``count`` more tokens."""
    if count > capacity:
        raise PackingError(f"cannot place {count} tokens in bins of capacity {capacity}")
    for b, load in enumerate(loads):
        if load + count <= capacity:
            return b
    raise PackingError("no bin has room; pass at least one empty bin")


@dataclass
class PackedBatch:
    data: Tensor  # (T', N, D)
    valid: np.ndarray  # (T', N) bool
    assign: np.ndarray  # source frame -> bin
    offset: np.ndarray  # source frame -> start position in its bin
    counts: np.ndarray  # source frame -> surviving tokens
    load: np.ndarray  # (T',) tokens per bin
    mask: np.ndarray  # (T', N, N) bool, True = attention allowed
    source_index: np.ndarray  # (T' * N,) flat source position feeding each slot, -1 = padding
    capacity: int
    comparisons: int = 0  # bin probes made by the first-fit search

    @property
    def num_bins(self) -> int:
        return int(self.load.size)

    @property
    def num_frames(self) -> int:
        return int(self.counts.size)

    @property
    def trivial_mask(self) -> bool:
        return bool(self.mask.all())


def plan_packing(counts, capacity: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Bin assignment for per-frame token counts.

    Returns (assign, offset, load of non-empty bins, probes).
    """
    counts = np.asarray(counts, dtype=np.int64)
    t = counts.size
    order = np.argsort(-counts, kind="stable")  # ties: lower frame index first
    loads = np.zeros(t, dtype=np.int64)
    assign = np.zeros(t, dtype=np.int64)
    offset = np.zeros(t, dtype=np.int64)
    probes = 0
    for i in order:
        c = int(counts[i])
        j = find_first_fit(c, loads, capacity)
        probes += j + 1
        assign[i] = j
        offset[i] = loads[j]
        loads[j] += c
    used = int(np.count_nonzero(loads))
    if used and loads[used:].any():
        raise PackingError("non-empty bins are not a prefix")
    return assign, offset, loads[:used].copy(), probes


def build_attention_mask(assign, offset, counts, num_bins: int, capacity: int) -> np.ndarray:
    """Block-diagonal mask: a slot pair is allowed iff both hold tokens of one source frame."""
    owner = np.full((num_bins, capacity), -1, dtype=np.int64)
    for f, (b, o, c) in enumerate(zip(assign, offset, counts)):
        if c == 0:
            continue
        span = owner[b, o:o + c]
        if span.size != c or (span != -1).any():
            raise PackingError(f"span of frame {f} overlaps another frame or overflows bin {b}")
        span[:] = f
    return (owner[:, :, None] == owner[:, None, :]) & (owner[:, :, None] >= 0)


def pack(tokens, retention) -> PackedBatch:
    """Scatter the surviving tokens of (F, N, D) ``tokens`` into first-fit-descending bins.

    ``retention`` is an (F, N) boolean mask or a RetentionMask.  Gradients
    flow back through the gather when ``tokens`` is tracked.
    """
    m = np.asarray(getattr(retention, "mask", retention), dtype=bool)
    if not isinstance(tokens, Tensor):
        tokens = Tensor(tokens)
    f, n, d = tokens.shape
    if m.shape != (f, n):
        raise nx.ShapeError(f"retention mask {m.shape} does not match tokens {tokens.shape[:2]}")
    counts = m.sum(axis=1)
    assign, offset, load, probes = plan_packing(counts, n)
    bins = load.size
    source = np.full(bins * n, -1, dtype=np.int64)
    for i in range(f):
        if counts[i]:
            kept = np.flatnonzero(m[i])
            start = assign[i] * n + offset[i]
            source[start:start + counts[i]] = i * n + kept
    flat = nx.reshape(tokens, (f * n, d))
    data = nx.reshape(nx.take(flat, source, axis=0), (bins, n, d))
    return PackedBatch(
        data=data,
        valid=(source >= 0).reshape(bins, n),
        assign=assign,
        offset=offset,
        counts=counts,
        load=load,
        mask=build_attention_mask(assign, offset, counts, bins, n),
        source_index=source,
        capacity=n,
        comparisons=probes,
    )


def unpack(packed: PackedBatch) -> list[np.ndarray]:
    """Per-source-frame arrays of surviving tokens in original patch order."""
    data = packed.data.data
    out = []
    for b, o, c in zip(packed.assign, packed.offset, packed.counts):
        out.append(data[b, o:o + c].copy() if c else np.zeros((0, data.shape[-1]), dtype=data.dtype))
    return out


# --------------------------------------------------------------------------
# Exact oracle
# --------------------------------------------------------------------------


def optimal_bins(counts, capacity: int) -> int:
    """Minimum number of bins, by exhaustive branch and bound (at most 12 items)."""
    counts = [int(c) for c in counts]
    if len(counts) > 12:
        raise ValueError("optimal_bins is a test oracle limited to 12 items")
    items = sorted((c for c in counts if c > 0), reverse=True)
    if any(c > capacity for c in items):
        raise ValueError("an item exceeds the bin capacity")
    if not items:
        return 0
    lower = -(-sum(items) // capacity)
    best = len(items)

    def search(i, loads):
        nonlocal best
        if len(loads) >= best:
            return
        if i == len(items):
            best = len(loads)
            return
        seen = set()
        for b in range(len(loads)):
            if loads[b] + items[i] <= capacity and loads[b] not in seen:
                seen.add(loads[b])
                loads[b] += items[i]
                search(i + 1, loads)
                loads[b] -= items[i]
                if best == lower:
                    return
        loads.append(items[i])
        search(i + 1, loads)
        loads.pop()

    search(0, [])
    return best


def masked_layout(tokens, retention) -> PackedBatch:
    """Pruned tokens masked out in place: one bin per frame, no compute saved.

    Baseline layout for throughput comparisons; spans are not contiguous.
    """
    m = np.asarray(getattr(retention, "mask", retention), dtype=bool)
    if not isinstance(tokens, Tensor):
        tokens = Tensor(tokens)
    f, n, _ = tokens.shape
    if m.shape != (f, n):
        raise nx.ShapeError(f"retention mask {m.shape} does not match tokens {tokens.shape[:2]}")
    counts = m.sum(axis=1)
    source = np.where(m.reshape(-1), np.arange(f * n), -1)
    return PackedBatch(
        data=tokens,
        valid=m.copy(),
        assign=np.arange(f),
        offset=np.zeros(f, dtype=np.int64),
        counts=counts,
        load=counts.copy(),
        mask=m[:, :, None] & m[:, None, :],
        source_index=source,
        capacity=n,
    )
