"""Binary tensor records and the model checkpoint directory.

Record layout (all little-endian)::

    b"STTS" | version u16 | precision u8 (0 = f32, 1 = f64) | rank u8
    | dims u64 * rank | row-major values

A model checkpoint is a directory holding ``weights.bin`` (concatenated
records), ``manifest.tsv`` (``name<TAB>offset<TAB>len`` per tensor) and
``config.json``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STTS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBB")
_PRECISION_FLAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_FLAG_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "manifest.tsv"
CONFIG_FILE = "config.json"


class CheckpointError(ValueError):
    """Structured load failure: what went wrong, in which file, at which byte."""

    def __init__(self, reason: str, path: str | None = None, offset: int | None = None):
        self.reason = reason
        self.path = path
        self.offset = offset
        where = ""
        if path is not None:
            where += f" in {path}"
        if offset is not None:
            where += f" at byte {offset}"
        super().__init__(f"{reason}{where}")


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    try:
        flag = _PRECISION_FLAG[arr.dtype]
    except KeyError:
        raise CheckpointError(f"unsupported dtype {arr.dtype}") from None
    if arr.ndim > 255:
        raise CheckpointError(f"rank {arr.ndim} does not fit in one byte")
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, flag, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    body = np.ascontiguousarray(arr, dtype=_FLAG_DTYPE[flag]).tobytes()
    return head + dims + body


def decode_tensor(buf: bytes, offset: int = 0, path: str | None = None) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, end offset)."""
    if len(buf) - offset < _HEADER.size:
        raise CheckpointError("truncated header", path, offset)
    magic, version, flag, rank = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", path, offset)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}", path, offset)
    if flag not in _FLAG_DTYPE:
        raise CheckpointError(f"unknown precision flag {flag}", path, offset)
    pos = offset + _HEADER.size
    if len(buf) - pos < 8 * rank:
        raise CheckpointError("truncated dims", path, pos)
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = _FLAG_DTYPE[flag]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise CheckpointError("truncated values", path, pos)
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf, 0, str(path))
    if end != len(buf):
        raise CheckpointError("trailing bytes after record", str(path), end)
    return arr


def save_model(directory, params: dict[str, np.ndarray], config: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs, lines, offset = [], [], 0
    for name, arr in params.items():
        if "\t" in name or "\n" in name:
            raise CheckpointError(f"tensor name {name!r} contains a tab or newline")
        rec = encode_tensor(arr)
        blobs.append(rec)
        lines.append(f"{name}\t{offset}\t{len(rec)}\n")
        offset += len(rec)
    (directory / WEIGHTS_FILE).write_bytes(b"".join(blobs))
    (directory / MANIFEST_FILE).write_text("".join(lines))
    (directory / CONFIG_FILE).write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def load_model(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    if not directory.is_dir():
        raise CheckpointError("checkpoint directory not found", str(directory))
    for fname in (WEIGHTS_FILE, MANIFEST_FILE, CONFIG_FILE):
        if not (directory / fname).is_file():
            raise CheckpointError(f"missing {fname}", str(directory))
    wpath = str(directory / WEIGHTS_FILE)
    buf = (directory / WEIGHTS_FILE).read_bytes()
    params = {}
    for lineno, line in enumerate((directory / MANIFEST_FILE).read_text().splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CheckpointError(f"manifest line {lineno} is malformed", str(directory / MANIFEST_FILE))
        name, off, length = parts[0], int(parts[1]), int(parts[2])
        arr, end = decode_tensor(buf, off, wpath)
        if end - off != length:
            raise CheckpointError(f"record {name!r} length mismatch", wpath, off)
        params[name] = arr
    try:
        config = json.loads((directory / CONFIG_FILE).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"config is not valid JSON ({exc.msg})", str(directory / CONFIG_FILE)) from None
    return params, config
