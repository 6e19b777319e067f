"""Keep/drop overlays as binary PGM images plus the text mask dump."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import foreground_retention
from .model import STTSModel, forward

DARKEN = 0.25  # pruned patches keep this fraction of their brightness


def encode_pgm(image: np.ndarray) -> bytes:
    """Binary P5 greymap from an (H, W) array in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    pix = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    """Inverse of encode_pgm (for 8-bit P5 files without comments)."""
    parts = buf.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError("only maxval 255 is supported")
    data = np.frombuffer(parts[3], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"expected {w * h} pixels, got {data.size}")
    return data.reshape(h, w).astype(np.float64) / 255.0


def overlay(frame: np.ndarray, keep: np.ndarray, patch_size: int) -> np.ndarray:
    """Darken the patches of ``frame`` (H, W) whose flag in ``keep`` (N,) is False."""
    h, w = frame.shape
    gh, gw = h // patch_size, w // patch_size
    grid = np.asarray(keep, dtype=bool).reshape(gh, gw)
    scale = np.where(np.kron(grid, np.ones((patch_size, patch_size), dtype=bool)), 1.0, DARKEN)
    return frame * scale


@dataclass
class VizResult:
    mask_text: str
    foreground_retention: float | None
    images: list[bytes]
    retained: int
    budget: int


def render(model: STTSModel, frames: np.ndarray, foreground: np.ndarray | None = None, *,
           mode: str | None = None, k: float | None = None, protect_first: bool | None = None,
           seed: int = 0) -> VizResult:
    """Prune one clip (T, H, W) and render every frame with pruned patches darkened."""
    frames = np.asarray(frames, dtype=np.float64)
    out = forward(model, frames[None], None, mode=mode, k=k, protect_first=protect_first, seeds=[seed])
    r = out.retention[0]
    fg = None if foreground is None else foreground_retention(r.mask, foreground)
    images = [encode_pgm(overlay(f, m, model.cfg.patch_size)) for f, m in zip(frames, r.mask)]
    return VizResult(r.dump(), fg, images, r.retained_count, r.budget)


def write_viz(result: VizResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, img in enumerate(result.images):
        p = out / f"frame_{t:03d}.pgm"
        p.write_bytes(img)
        paths.append(p)
    (out / "mask.txt").write_text(result.mask_text)
    return paths
