"""Toy multi-frame ViT encoder.

Frames are patchified row-major, given learned per-patch position
embeddings shared across frames, and run through pre-norm transformer
layers. Attention never crosses a frame boundary: unpacked inputs are
``(frames, N, D)`` batches, packed inputs carry a block mask per bin.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import numerics as nx
from .config import ConfigError, PipelineConfig
from .numerics import Tensor

LN_EPS = 1e-5
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def block_index(grid: int, w: int) -> np.ndarray:
    """Map each row-major patch index to the index of its w x w pooled block."""
    if grid % w:
        raise ConfigError(f"grid {grid} is not divisible by pool width {w}")
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    return (rows // w) * (grid // w) + cols // w


def _linear_init(rng, fan_in, fan_out, scale, dtype):
    return rng.normal(0.0, scale, size=(fan_in, fan_out)).astype(dtype)


def init_layer_params(cfg: PipelineConfig, prefix: str, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
    d, hidden, s = cfg.dim, cfg.dim * cfg.mlp_ratio, cfg.init_scale
    p = {
        f"{prefix}.ln1.g": np.ones(d, dtype), f"{prefix}.ln1.b": np.zeros(d, dtype),
        f"{prefix}.ln2.g": np.ones(d, dtype), f"{prefix}.ln2.b": np.zeros(d, dtype),
    }
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.attn.{name}.w"] = _linear_init(rng, d, d, s, dtype)
        p[f"{prefix}.attn.{name}.b"] = np.zeros(d, dtype)
    p[f"{prefix}.mlp.fc1.w"] = _linear_init(rng, d, hidden, s, dtype)
    p[f"{prefix}.mlp.fc1.b"] = np.zeros(hidden, dtype)
    p[f"{prefix}.mlp.fc2.w"] = _linear_init(rng, hidden, d, s, dtype)
    p[f"{prefix}.mlp.fc2.b"] = np.zeros(d, dtype)
    return p


def init_encoder_params(cfg: PipelineConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    dtype = nx.resolve_dtype(cfg.precision)
    patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
    p = {
        "embed.w": rng.normal(0.0, 1.0 / math.sqrt(patch_dim), size=(patch_dim, cfg.dim)).astype(dtype),
        "embed.b": np.zeros(cfg.dim, dtype),
        "pos": rng.normal(0.0, cfg.init_scale, size=(cfg.num_patches, cfg.dim)).astype(dtype),
    }
    for i in range(cfg.layers):
        p.update(init_layer_params(cfg, f"layer{i}", rng, dtype))
    return p


# --------------------------------------------------------------------------
# Front end
# --------------------------------------------------------------------------


def patch_pixels(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """(T, H, W[, C]) pixels -> (T, N, p*p*C) patch vectors, row-major patch order."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[..., None]
    if frames.ndim != 4:
        raise ConfigError(f"expected frames shaped (T, H, W[, C]), got {frames.shape}")
    t, h, w, c = frames.shape
    if t < 1:
        raise ConfigError("need at least one frame")
    if h % patch_size or w % patch_size:
        raise ConfigError(f"frame size {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = frames.reshape(t, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(t, gh * gw, patch_size * patch_size * c)


def patchify(frames: np.ndarray, patch_size: int, embed_w: Tensor, embed_b: Tensor) -> Tensor:
    """Linear embedding of centred patch pixels, no position term: shape (T, N, D)."""
    pix = (patch_pixels(frames, patch_size) - PIXEL_MEAN) / PIXEL_STD
    pix = Tensor(pix.astype(embed_w.dtype, copy=False))
    return nx.add(nx.matmul(pix, embed_w), embed_b)


def embed_frames(frames: np.ndarray, params: dict[str, Tensor], cfg: PipelineConfig) -> Tensor:
    """Patch embedding plus the per-patch position embedding shared by all frames."""
    tokens = patchify(frames, cfg.patch_size, params["embed.w"], params["embed.b"])
    return nx.add(tokens, params["pos"])


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


def attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int,
              bias: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention over axis 1 of ``x`` (B, n, D).

    ``bias`` (B, n) is added on the key side for every query and head.
    ``mask`` (B, n, n) marks allowed query/key pairs.
    """
    b, n, d = x.shape
    dk = d // heads

    def proj(name):
        y = nx.add(nx.matmul(x, params[f"{prefix}.{name}.w"]), params[f"{prefix}.{name}.b"])
        return nx.transpose(nx.reshape(y, (b, n, heads, dk)), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    logits = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2)))
    if bias is not None:
        if bias.shape != (b, n):
            raise nx.ShapeError(f"attention bias must be {(b, n)}, got {bias.shape}")
        bias = nx.reshape(bias, (b, 1, 1, n))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)[:, None, :, :]
    probs = nx.softmax_biased(logits, bias, mask, scale=1.0 / math.sqrt(dk))
    out = nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3))
    out = nx.reshape(out, (b, n, d))
    return nx.add(nx.matmul(out, params[f"{prefix}.o.w"]), params[f"{prefix}.o.b"])


def encoder_layer(x: Tensor, params: dict[str, Tensor], idx: int, heads: int,
                  bias: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
    return transformer_block(x, params, f"layer{idx}", heads, bias, mask)


def transformer_block(x: Tensor, params: dict[str, Tensor], pre: str, heads: int,
                      bias: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm attention + MLP block whose parameters live under ``pre``."""
    h = nx.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"], LN_EPS)
    x = nx.add(x, attention(h, params, f"{pre}.attn", heads, bias, mask))
    h = nx.layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"], LN_EPS)
    h = nx.gelu(nx.add(nx.matmul(h, params[f"{pre}.mlp.fc1.w"]), params[f"{pre}.mlp.fc1.b"]))
    h = nx.add(nx.matmul(h, params[f"{pre}.mlp.fc2.w"]), params[f"{pre}.mlp.fc2.b"])
    return nx.add(x, h)


def run_layers(x: Tensor, params: dict[str, Tensor], layer_ids, heads: int,
               mask: np.ndarray | None = None) -> Tensor:
    for i in layer_ids:
        x = encoder_layer(x, params, i, heads, mask=mask)
    return x


def encode_pre(tokens: Tensor, params: dict[str, Tensor], cfg: PipelineConfig) -> Tensor:
    """Layers 0..l, each frame attending only to itself."""
    if tokens.ndim != 3:
        raise nx.ShapeError(f"encode_pre expects (frames, N, D), got {tokens.shape}")
    return run_layers(tokens, params, range(cfg.layer + 1), cfg.heads)


def encode_biased_layer(tokens: Tensor, params: dict[str, Tensor], cfg: PipelineConfig,
                        bias: Tensor | None) -> Tensor:
    """Layer l+1 with the score bias added to the attention logits of every key."""
    if bias is not None and bias.shape != tokens.shape[:2]:
        raise nx.ShapeError(f"bias shape {bias.shape} does not match tokens {tokens.shape[:2]}")
    return encoder_layer(tokens, params, cfg.layer + 1, cfg.heads, bias=bias)


def encode_packed(packed, params: dict[str, Tensor], cfg: PipelineConfig):
    """Layers l+2..end on a PackedBatch; only same-source-frame pairs attend."""
    if packed.num_bins == 0:
        return packed
    mask = None if packed.trivial_mask else packed.mask
    out = run_layers(packed.data, params, range(cfg.layer + 2, cfg.layers), cfg.heads, mask=mask)
    return dataclasses.replace(packed, data=out)


def spatial_pool(tokens: Tensor, w: int) -> Tensor:
    """Mean over each w x w block of the patch grid: (..., N, D) -> (..., N/w^2, D)."""
    *lead, n, d = tokens.shape
    grid = math.isqrt(n)
    if grid * grid != n:
        raise ConfigError(f"{n} patches do not form a square grid")
    if grid % w:
        raise ConfigError(f"grid {grid} is not divisible by pool width {w}")
    g = grid // w
    lead = tuple(lead)
    x = nx.reshape(tokens, lead + (g, w, g, w, d))
    k = len(lead)
    x = nx.transpose(x, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    x = nx.reshape(x, lead + (g * g, w * w, d))
    return nx.mean(x, axis=k + 1)
