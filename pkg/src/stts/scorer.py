"""Spatio-temporal token scorer.

Pooled features of each frame go through one self-attention layer, are
concatenated with the previous frame's pooled features (zeros for frame 0)
and mapped by a 2D -> D -> D/2 -> 1 MLP to a score in [1e-6, 1]. Scores are
expanded back to patch resolution and their log becomes the attention bias
of the next encoder layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import PipelineConfig
from .encoder import LN_EPS, attention, block_index, spatial_pool
from .numerics import Tensor

SCORE_FLOOR = 1e-6


@dataclass
class ScoreMap:
    pooled: Tensor  # (..., T, M)
    expanded: Tensor  # (..., T, N)
    bias: Tensor  # log(expanded)
    ignore_first: bool = True  # frame 0 is scored but never pruned


def init_scorer_params(cfg: PipelineConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    dtype = nx.resolve_dtype(cfg.precision)
    d = cfg.dim
    p = {"scorer.pool.ln.g": np.ones(d, dtype), "scorer.pool.ln.b": np.zeros(d, dtype)}
    for name in ("q", "k", "v", "o"):
        p[f"scorer.pool.attn.{name}.w"] = rng.normal(0.0, cfg.init_scale, size=(d, d)).astype(dtype)
        p[f"scorer.pool.attn.{name}.b"] = np.zeros(d, dtype)
    widths = [2 * d, d, d // 2, 1]
    for i in range(3):
        fan_in, fan_out = widths[i], widths[i + 1]
        p[f"scorer.mlp{i}.w"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)).astype(dtype)
        p[f"scorer.mlp{i}.b"] = np.zeros(fan_out, dtype)
    return p


def pooler_forward(x_l: Tensor, params: dict[str, Tensor], cfg: PipelineConfig) -> Tensor:
    """Mean-pool w x w blocks, then one pre-norm self-attention layer per frame."""
    pooled = spatial_pool(x_l, cfg.pool_width)
    h = nx.layer_norm(pooled, params["scorer.pool.ln.g"], params["scorer.pool.ln.b"], LN_EPS)
    return nx.add(pooled, attention(h, params, "scorer.pool.attn", cfg.heads))


def temporal_concat(pooled: Tensor) -> Tensor:
    """(..., T, M, D) -> (..., T, M, 2D): row t is [pooled_t | pooled_{t-1}], zeros before frame 0."""
    t = pooled.shape[-3]
    prev = nx.take(pooled, np.arange(-1, t - 1), axis=pooled.ndim - 3)
    return nx.concat([pooled, prev], axis=-1)


def score(concat: Tensor, params: dict[str, Tensor]) -> Tensor:
    """3-layer MLP head; returns scores in [SCORE_FLOOR, 1] shaped (..., T, M)."""
    h = nx.gelu(nx.add(nx.matmul(concat, params["scorer.mlp0.w"]), params["scorer.mlp0.b"]))
    h = nx.gelu(nx.add(nx.matmul(h, params["scorer.mlp1.w"]), params["scorer.mlp1.b"]))
    h = nx.add(nx.matmul(h, params["scorer.mlp2.w"]), params["scorer.mlp2.b"])
    s = nx.sigmoid_clamped(h, SCORE_FLOOR)
    return nx.reshape(s, s.shape[:-1])


def expand_and_bias(pooled_scores: Tensor, w: int, num_patches: int) -> ScoreMap:
    grid = math.isqrt(num_patches)
    expanded = nx.take(pooled_scores, block_index(grid, w), axis=pooled_scores.ndim - 1)
    return ScoreMap(pooled=pooled_scores, expanded=expanded, bias=nx.log(expanded))


def score_frames(x_l: Tensor, params: dict[str, Tensor], cfg: PipelineConfig, videos: int = 1) -> ScoreMap:
    """Full scorer on encoder features ``x_l`` shaped (videos * T, N, D)."""
    frames = x_l.shape[0] // videos
    pooled = pooler_forward(x_l, params, cfg)
    pooled = nx.reshape(pooled, (videos, frames) + pooled.shape[1:])
    scores = score(temporal_concat(pooled), params)
    return expand_and_bias(scores, cfg.pool_width, cfg.num_patches)
