"""Synthetic moving-sprite videos with per-patch foreground ground truth.

A textured square sprite starts near the frame centre and drifts towards one
of the four quadrants; the label is the quadrant holding the sprite centre in
the final frame (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
Optional camera pans shift the background during alternating segments.
"""

from __future__ import annotations

import dataclasses
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASET_FORMAT = "stts-synthetic/1"
HEADER_END = "---"


class SpecError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticVideoSpec:
    frame_size: int = 24
    patch_size: int = 4
    frames: int = 8
    sprite_size: int = 6
    sprite_speed: float = 1.2  # pixels per frame
    direction_jitter: float = 20.0  # degrees around the quadrant diagonal
    start_jitter: float = 1.5  # pixels around the frame centre
    texture_seed: int = 1
    background_seed: int = 2
    noise: float = 0.02
    pan_period: int = 0  # frames per pan/hold segment; 0 = static camera
    pan_speed: int = 2  # pixels per frame while panning

    def validate(self) -> None:
        if self.frame_size % self.patch_size:
            raise SpecError("frame_size must be divisible by patch_size")
        if not 0 < self.sprite_size <= self.frame_size:
            raise SpecError("sprite_size must be in (0, frame_size]")
        if self.frames < 1:
            raise SpecError("frames must be >= 1")
        if self.noise < 0 or self.sprite_speed < 0:
            raise SpecError("noise and sprite_speed must be non-negative")

    @property
    def grid(self) -> int:
        return self.frame_size // self.patch_size

    def to_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in dataclasses.fields(self)]

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "SyntheticVideoSpec":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        args = {}
        for key, raw in kv.items():
            if key not in types:
                raise SpecError(f"unknown spec field {key!r}")
            args[key] = float(raw) if types[key] in ("float", float) else int(raw)
        spec = cls(**args)
        spec.validate()
        return spec

    @classmethod
    def parse(cls, text: str) -> "SyntheticVideoSpec":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise SpecError(f"expected key=value, got {line!r}")
            kv[key.strip()] = value.strip()
        return cls.from_mapping(kv)


@dataclass
class SyntheticVideo:
    frames: np.ndarray  # (T, H, W) float in [0, 1], multiples of 1/255
    label: int
    foreground: np.ndarray  # (T, N) bool
    positions: np.ndarray  # (T, 2) sprite top-left (row, col)


def _smooth_texture(rng, h, w, cells=4):
    coarse = rng.uniform(0.25, 0.75, size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c = coarse
    top = c[y0][:, x0] * (1 - fx) + c[y0][:, x0 + 1] * fx
    bot = c[y0 + 1][:, x0] * (1 - fx) + c[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy + rng.normal(0.0, 0.03, size=(h, w))


def pan_offsets(spec: SyntheticVideoSpec) -> np.ndarray:
    """Horizontal camera offset per frame; pans run in every second segment."""
    off = np.zeros(spec.frames, dtype=np.int64)
    if spec.pan_period <= 0:
        return off
    for t in range(1, spec.frames):
        panning = (t // spec.pan_period) % 2 == 1
        off[t] = off[t - 1] + (spec.pan_speed if panning else 0)
    return off


def sprite_patch_mask(top: int, left: int, size: int, patch: int, grid: int) -> np.ndarray:
    """Row-major flags for patches that overlap the sprite's bounding box."""
    rows = np.arange(grid)
    r_hit = (rows * patch < top + size) & ((rows + 1) * patch > top)
    c_hit = (rows * patch < left + size) & ((rows + 1) * patch > left)
    return (r_hit[:, None] & c_hit[None, :]).reshape(-1)


def quadrant(center_row: float, center_col: float, frame_size: int) -> int:
    return 2 * int(center_row >= frame_size / 2) + int(center_col >= frame_size / 2)


def gen_synthetic(spec: SyntheticVideoSpec, seed: int) -> SyntheticVideo:
    spec.validate()
    size, s = spec.frame_size, spec.sprite_size
    # scene (background, sprite texture) is fixed by the spec; motion and noise vary per video
    rng = np.random.default_rng(seed)

    target = int(rng.integers(4))
    base = {0: 225.0, 1: 315.0, 2: 135.0, 3: 45.0}[target]  # angle with +col = 0, +row = 90
    angle = math.radians(base + rng.uniform(-spec.direction_jitter, spec.direction_jitter))
    step = np.array([math.sin(angle), math.cos(angle)]) * spec.sprite_speed
    start = size / 2 + rng.uniform(-spec.start_jitter, spec.start_jitter, size=2)
    centers = start[None, :] + np.arange(spec.frames)[:, None] * step[None, :]
    tops = np.round(centers - s / 2).astype(np.int64)
    if tops.min() < 0 or tops.max() + s > size:
        raise SpecError("sprite leaves the frame; lower sprite_speed or sprite_size")

    offsets = pan_offsets(spec)
    background = _smooth_texture(np.random.default_rng(spec.background_seed), size, size + int(offsets[-1]))
    sprite = np.where(np.random.default_rng(spec.texture_seed).random((s, s)) < 0.5, 0.05, 0.95)

    frames = np.empty((spec.frames, size, size))
    fg = np.empty((spec.frames, spec.grid * spec.grid), dtype=bool)
    for t in range(spec.frames):
        img = background[:, offsets[t]:offsets[t] + size].copy()
        r, c = tops[t]
        img[r:r + s, c:c + s] = sprite
        if spec.noise:
            img = img + rng.normal(0.0, spec.noise, size=img.shape)
        frames[t] = img
        fg[t] = sprite_patch_mask(r, c, s, spec.patch_size, spec.grid)
    frames = np.round(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0
    end = tops[-1] + s / 2
    label = quadrant(end[0], end[1], size)
    return SyntheticVideo(frames=frames, label=label, foreground=fg, positions=tops)


# --------------------------------------------------------------------------
# Dataset file
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    spec: SyntheticVideoSpec
    seed: int
    frames: np.ndarray  # (count, T, H, W)
    labels: np.ndarray  # (count,)
    foreground: np.ndarray  # (count, T, N) bool

    def __len__(self) -> int:
        return int(self.labels.size)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.spec, self.seed, self.frames[idx], self.labels[idx], self.foreground[idx])


def generate_dataset(spec: SyntheticVideoSpec, count: int, seed: int) -> Dataset:
    videos = [gen_synthetic(spec, seed * 1_000_003 + i) for i in range(count)]
    t, size, n = spec.frames, spec.frame_size, spec.grid ** 2
    return Dataset(
        spec=spec,
        seed=seed,
        frames=np.stack([v.frames for v in videos]) if videos else np.zeros((0, t, size, size)),
        labels=np.array([v.label for v in videos], dtype=np.int64),
        foreground=np.stack([v.foreground for v in videos]) if videos else np.zeros((0, t, n), dtype=bool),
    )


def encode_dataset(ds: Dataset) -> bytes:
    header = [f"format={DATASET_FORMAT}", f"count={len(ds)}", f"seed={ds.seed}", *ds.spec.to_lines(), HEADER_END]
    out = io.BytesIO()
    out.write(("\n".join(header) + "\n").encode("ascii"))
    for i in range(len(ds)):
        out.write(np.round(ds.frames[i] * 255.0).astype(np.uint8).tobytes())
        out.write(bytes([int(ds.labels[i])]))
        out.write(np.packbits(ds.foreground[i].reshape(-1)).tobytes())
    return out.getvalue()


def write_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def decode_dataset(buf: bytes) -> Dataset:
    end_marker = f"\n{HEADER_END}\n".encode("ascii")
    pos = buf.find(end_marker)
    if pos < 0:
        raise DatasetError("header terminator not found")
    kv = {}
    for line in buf[:pos].decode("ascii").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise DatasetError(f"malformed header line {line!r}")
        kv[key] = value
    if kv.pop("format", None) != DATASET_FORMAT:
        raise DatasetError("not a synthetic dataset file (format line missing or wrong)")
    try:
        count, seed = int(kv.pop("count")), int(kv.pop("seed"))
    except KeyError as exc:
        raise DatasetError(f"header is missing {exc.args[0]!r}") from None
    spec = SyntheticVideoSpec.from_mapping(kv)
    t, size, n = spec.frames, spec.frame_size, spec.grid ** 2
    npix, nbits = t * size * size, (t * n + 7) // 8
    rec = npix + 1 + nbits
    body = buf[pos + len(end_marker):]
    if len(body) != count * rec:
        raise DatasetError(f"expected {count} records of {rec} bytes, found {len(body)} bytes")
    raw = np.frombuffer(body, dtype=np.uint8).reshape(count, rec)
    frames = raw[:, :npix].reshape(count, t, size, size).astype(np.float64) / 255.0
    labels = raw[:, npix].astype(np.int64)
    fg = np.unpackbits(raw[:, npix + 1:], axis=1)[:, : t * n].reshape(count, t, n).astype(bool)
    return Dataset(spec=spec, seed=seed, frames=frames, labels=labels, foreground=fg)


def read_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())
