"""End-to-end pipeline: encoder, scorer, pruning, packing, task head, losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .aux_loss import SimilarityMap, neighbor_cosine, similarity_loss, total_loss
from .baselines import heuristic_prune, random_prune
from .checkpoint import load_model, save_model
from .config import PipelineConfig
from .encoder import (
    LN_EPS,
    embed_frames,
    encode_biased_layer,
    encode_packed,
    encode_pre,
    init_encoder_params,
    init_layer_params,
    spatial_pool,
    transformer_block,
)
from .numerics import Tensor
from .packing import PackedBatch, RetentionMask, masked_layout, pack, select_retention
from .scorer import ScoreMap, init_scorer_params, score_frames


def init_head_params(cfg: PipelineConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    dtype = nx.resolve_dtype(cfg.precision)
    p = {
        "head.ln.g": np.ones(cfg.dim, dtype),
        "head.ln.b": np.zeros(cfg.dim, dtype),
        "head.w": rng.normal(0.0, cfg.init_scale, size=(cfg.dim, cfg.num_classes)).astype(dtype),
        "head.b": np.zeros(cfg.num_classes, dtype),
    }
    if cfg.head_mixer:
        p.update(init_layer_params(cfg, "head.mix", rng, dtype))
    return p


def stem_names(cfg: PipelineConfig) -> set[str]:
    """Parameters feeding x_l: patch embedding, positions, layers 0..l."""
    prefixes = ("embed.", "pos") + tuple(f"layer{i}." for i in range(cfg.layer + 1))
    names = init_encoder_params(cfg, np.random.default_rng(0)).keys()
    return {n for n in names if n.startswith(prefixes)}


class STTSModel:
    """Parameters plus configuration; parameters are tracked Tensors keyed by name."""

    def __init__(self, cfg: PipelineConfig, arrays: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        if arrays is None:
            rng = np.random.default_rng(cfg.seed)
            arrays = {**init_encoder_params(cfg, rng), **init_scorer_params(cfg, rng), **init_head_params(cfg, rng)}
        dtype = nx.resolve_dtype(cfg.precision)
        frozen = stem_names(cfg) if cfg.freeze_stem else set()
        self.params = {k: Tensor(np.array(v, dtype=dtype), requires_grad=k not in frozen, name=k)
                       for k, v in arrays.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path) -> None:
        save_model(path, self.arrays(), self.cfg.to_dict())

    @classmethod
    def load(cls, path) -> "STTSModel":
        arrays, config = load_model(path)
        return cls(PipelineConfig.from_dict(config), arrays)


@dataclass
class ForwardOutput:
    logits: Tensor
    loss: Tensor | None
    task_loss: Tensor | None
    sim_loss: Tensor | None
    scores: ScoreMap | None
    similarity: SimilarityMap
    retention: list[RetentionMask]
    packed: PackedBatch
    features: Tensor  # encoder output after the injection layer, unpacked

    @property
    def predictions(self) -> np.ndarray:
        return self.logits.data.argmax(axis=1)

    @property
    def retained_ratio(self) -> float:
        kept = sum(r.retained_count for r in self.retention)
        total = sum(r.mask.size for r in self.retention)
        return kept / total


def _full_mask(frames: int, cfg: PipelineConfig) -> RetentionMask:
    return RetentionMask(
        mask=np.ones((frames, cfg.num_patches), dtype=bool),
        block_mask=np.ones((frames, cfg.num_pooled), dtype=bool),
        budget=frames * cfg.num_patches,
    )


def choose_retention(mode: str, cfg: PipelineConfig, k: float, protect_first: bool,
                     scores: ScoreMap | None, sim: SimilarityMap, seeds) -> list[RetentionMask]:
    videos, frames = sim.targets.shape[:2]
    w, grid = cfg.pool_width, cfg.grid
    out = []
    for b in range(videos):
        if mode == "none" or k == 0:
            out.append(_full_mask(frames, cfg))
        elif mode == "stts":
            if scores is None:
                raise ValueError("stts pruning needs the scorer")
            out.append(select_retention(scores.pooled.data[b], k, w, grid, protect_first))
        elif mode == "heuristic":
            out.append(heuristic_prune(sim.sims.data[b], k, w, grid, protect_first))
        elif mode == "random":
            out.append(random_prune(frames, cfg.num_patches, w, k, int(seeds[b]), protect_first))
        else:
            raise ValueError(f"unknown prune mode {mode!r}")
    return out


def head_pooling_matrix(packed: PackedBatch, videos: int, frames: int, patches: int, dtype) -> np.ndarray:
    """(videos, bins * N) weights averaging each video's surviving tokens."""
    src = packed.source_index
    slots = np.flatnonzero(src >= 0)
    owner = src[slots] // patches // frames
    pool = np.zeros((videos, src.size), dtype=dtype)
    counts = np.bincount(owner, minlength=videos)
    pool[owner, slots] = 1.0 / counts[owner]
    return pool


def video_token_index(packed: PackedBatch, videos: int, frames: int, patches: int) -> np.ndarray:
    """(videos, L) slots of the flattened packed tensor holding each video's survivors, -1 padded."""
    src = packed.source_index
    slots = np.flatnonzero(src >= 0)
    owner = src[slots] // patches // frames
    counts = np.bincount(owner, minlength=videos)
    index = np.full((videos, max(int(counts.max(initial=0)), 1)), -1, dtype=np.int64)
    for v in range(videos):
        mine = slots[owner == v]
        index[v, :mine.size] = mine
    return index


def mix_video_tokens(packed: PackedBatch, params: dict[str, Tensor], heads: int, videos: int,
                     frames: int, patches: int) -> tuple[Tensor, np.ndarray]:
    """One global attention block over all surviving tokens of each video.

    Stand-in for a downstream language model: its cost grows with the square
    of the surviving token count. Returns (videos, L, D) tokens and the valid mask.
    """
    d = packed.data.shape[-1]
    index = video_token_index(packed, videos, frames, patches)
    valid = index >= 0
    x = nx.reshape(nx.take(nx.reshape(packed.data, (-1, d)), index.reshape(-1), axis=0), index.shape + (d,))
    mask = None if valid.all() else valid[:, :, None] & valid[:, None, :]
    return transformer_block(x, params, "head.mix", heads, mask=mask), valid


def task_head(packed: PackedBatch, params: dict[str, Tensor], videos: int, frames: int, patches: int,
              heads: int | None = None) -> Tensor:
    """Final norm, mean over each video's surviving tokens, linear classifier.

    With ``head.mix.*`` parameters present, the survivors first pass through
    one global attention block (``heads`` heads).
    """
    d = params["head.ln.g"].shape[0]
    dtype = params["head.w"].dtype
    if packed.num_bins == 0:
        pooled = Tensor(np.zeros((videos, d), dtype=dtype))
    elif "head.mix.ln1.g" in params:
        x, valid = mix_video_tokens(packed, params, heads, videos, frames, patches)
        h = nx.layer_norm(x, params["head.ln.g"], params["head.ln.b"], LN_EPS)
        weights = valid / np.maximum(valid.sum(axis=1, keepdims=True), 1)
        pooled = nx.reshape(nx.matmul(Tensor(weights[:, None, :].astype(dtype)), h), (videos, d))
    else:
        h = nx.layer_norm(packed.data, params["head.ln.g"], params["head.ln.b"], LN_EPS)
        flat = nx.reshape(h, (-1, d))
        pool = Tensor(head_pooling_matrix(packed, videos, frames, patches, dtype))
        pooled = nx.matmul(pool, flat)
    return nx.add(nx.matmul(pooled, params["head.w"]), params["head.b"])


def forward(model: STTSModel, frames: np.ndarray, labels=None, *, mode: str | None = None,
            k: float | None = None, protect_first: bool | None = None, seeds=None,
            layout: str = "packed", use_scorer: bool = True) -> ForwardOutput:
    """Run the pipeline on ``frames`` shaped (videos, T, H, W[, C]).

    ``layout`` is "packed" (first-fit-descending bins) or "masked" (pruned
    tokens masked in place). ``use_scorer=False`` skips the scorer and the
    bias injection (plain encoder).
    """
    cfg, p = model.cfg, model.params
    mode = cfg.mode if mode is None else mode
    k = cfg.prune_ratio if k is None else k
    protect_first = cfg.protect_first if protect_first is None else protect_first
    frames = np.asarray(frames)
    videos, t = frames.shape[:2]
    n = cfg.num_patches
    if seeds is None:
        seeds = np.arange(videos) + cfg.seed
    dtype = nx.resolve_dtype(cfg.precision)

    flat_frames = frames.reshape((videos * t,) + frames.shape[2:]).astype(dtype, copy=False)
    x = embed_frames(flat_frames, p, cfg)
    x_l = encode_pre(x, p, cfg)

    # targets are ground truth: no gradient through the cosine
    pooled_l = spatial_pool(x_l.detach(), cfg.pool_width)
    sim = neighbor_cosine(nx.reshape(pooled_l, (videos, t) + pooled_l.shape[1:]))

    # scorer reads x_l as a constant: L_sim must not reshape the encoder
    scores = score_frames(x_l.detach(), p, cfg, videos) if use_scorer else None
    bias = nx.reshape(scores.bias, (videos * t, n)) if scores is not None else None
    x_b = encode_biased_layer(x_l, p, cfg, bias)

    retention = choose_retention(mode, cfg, k, protect_first, scores, sim, seeds)
    keep = np.concatenate([r.mask for r in retention], axis=0)
    if layout == "packed":
        packed = pack(x_b, keep)
    elif layout == "masked":
        packed = masked_layout(x_b, keep)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    packed = encode_packed(packed, p, cfg)
    logits = task_head(packed, p, videos, t, n, cfg.heads)

    task = sim_loss = None
    if labels is not None and cfg.task_loss:
        task = nx.cross_entropy(logits, labels)
    if scores is not None and cfg.aux_loss:
        _, sim_loss = similarity_loss(scores.pooled, sim)
    loss = total_loss(task, sim_loss) if (task is not None or sim_loss is not None) else None
    return ForwardOutput(logits=logits, loss=loss, task_loss=task, sim_loss=sim_loss, scores=scores,
                         similarity=sim, retention=retention, packed=packed, features=x_b)


@dataclass
class ScoreOutput:
    scores: ScoreMap
    similarity: SimilarityMap
    sim_loss: Tensor
    per_element: np.ndarray


def score_only(model: STTSModel, frames: np.ndarray) -> ScoreOutput:
    """Scorer and L_sim on a frozen encoder; no layer past l is run.

    Encoder features are computed off the tape, so only scorer parameters
    receive gradients.
    """
    cfg, p = model.cfg, model.params
    frames = np.asarray(frames)
    videos, t = frames.shape[:2]
    dtype = nx.resolve_dtype(cfg.precision)
    flat_frames = frames.reshape((videos * t,) + frames.shape[2:]).astype(dtype, copy=False)
    with nx.no_tape():
        x_l = encode_pre(embed_frames(flat_frames, p, cfg), p, cfg).detach()
        pooled_l = spatial_pool(x_l, cfg.pool_width)
        sim = neighbor_cosine(nx.reshape(pooled_l, (videos, t) + pooled_l.shape[1:]))
    scores = score_frames(x_l, p, cfg, videos)
    per_element, loss = similarity_loss(scores.pooled, sim)
    return ScoreOutput(scores, sim, loss, per_element)
