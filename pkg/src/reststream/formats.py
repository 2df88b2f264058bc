"""Binary artifact formats.

RESTTNSR (single tensor)::

    magic  b"RESTTNSR"            8 bytes
    version u32 LE                (1)
    rank    u32 LE
    dims    u64 LE x rank
    payload f32 LE, row-major

RESTCKPT (named tensors, sorted by name)::

    magic  b"RESTCKPT"            8 bytes
    version u32 LE                (1)
    count   u32 LE
    per tensor: name_len u16 LE, UTF-8 name, rank u32 LE, dims u64 LE x rank, f32 LE payload

RESTVIDF (raw decoded video)::

    magic  b"RESTVIDF"            8 bytes
    version u32 LE                (1)
    H, W, F, C u32 LE each
    payload f32 LE in [F, H, W, C] order (one frame after another)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

TENSOR_MAGIC = b"RESTTNSR"
CKPT_MAGIC = b"RESTCKPT"
VIDEO_MAGIC = b"RESTVIDF"
VERSION = 1

_F32LE = np.dtype("<f4")


class FormatError(ValueError):
    pass


def _write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=_F32LE)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_array(fh: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, 4 * count)
    return np.frombuffer(payload, dtype=_F32LE).reshape(dims).astype(np.float32)


def _check_header(fh: BinaryIO, magic: bytes) -> None:
    got = _read_exact(fh, 8)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (ver,) = struct.unpack("<I", _read_exact(fh, 4))
    if ver != VERSION:
        raise FormatError(f"unsupported version {ver}")


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_array(fh, np.asarray(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_header(fh, TENSOR_MAGIC)
        return _read_array(fh)


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    names = sorted(tensors)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"tensor name too long: {name[:40]}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            _write_array(fh, np.asarray(tensors[name]))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        _check_header(fh, CKPT_MAGIC)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, n).decode("utf-8")
            out[name] = _read_array(fh)
    return out


def save_video(path: str | Path, video: np.ndarray) -> None:
    """Write a [H, W, F, C] video as RESTVIDF."""
    if video.ndim != 4:
        raise FormatError(f"video must be [H, W, F, C], got shape {video.shape}")
    H, W, F, C = video.shape
    frames = np.ascontiguousarray(np.transpose(video, (2, 0, 1, 3)), dtype=_F32LE)
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<I4I", VERSION, H, W, F, C))
        fh.write(frames.tobytes(order="C"))


def load_video(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_header(fh, VIDEO_MAGIC)
        H, W, F, C = struct.unpack("<4I", _read_exact(fh, 16))
        raw = _read_exact(fh, 4 * H * W * F * C)
    frames = np.frombuffer(raw, dtype=_F32LE).reshape(F, H, W, C)
    return np.transpose(frames, (1, 2, 0, 3)).astype(np.float32)
