"""Chunk layouts with a one-frame overlap, and chunk-constant timestep vectors.

Frames are numbered from 1 (frame 0 is the reference slot). Chunk ``j``
(1-based) spans frames ``1 + (j-1)(f-1) .. 1 + j(f-1)``; consecutive chunks
share one boundary frame, which is owned by the earlier chunk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import DomainError

FRAME_AXIS = 2


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class LatentSequence:
    """Latent frames [h, w, f, c] plus the clean reference latent [h, w, 1, c]."""

    ref: np.ndarray
    frames: np.ndarray

    def __post_init__(self):
        if self.ref.ndim != 4 or self.frames.ndim != 4:
            raise LayoutError("latents must be [h, w, f, c]")
        if self.ref.shape[FRAME_AXIS] != 1:
            raise LayoutError(f"reference slot must hold one frame, got {self.ref.shape}")
        if self.ref.shape[:2] != self.frames.shape[:2] or self.ref.shape[3] != self.frames.shape[3]:
            raise LayoutError(f"reference {self.ref.shape} does not match frames {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[FRAME_AXIS]

    def with_ref(self) -> np.ndarray:
        return np.concatenate([self.ref, self.frames], axis=FRAME_AXIS)


@dataclass(frozen=True)
class ChunkLayout:
    f_total: int
    chunk_len: int

    def __post_init__(self):
        f = self.chunk_len
        if f < 2:
            raise LayoutError(f"chunk length must be >= 2, got {f}")
        if self.f_total < f or (self.f_total - 1) % (f - 1):
            lo = max(1, (self.f_total - 1) // (f - 1))
            near = sorted({1 + lo * (f - 1), 1 + (lo + 1) * (f - 1)})
            raise LayoutError(
                f"{self.f_total} frames cannot be split into chunks of {f} with one-frame overlap; "
                f"nearest valid lengths: {near}"
            )

    @classmethod
    def for_chunks(cls, k: int, chunk_len: int) -> "ChunkLayout":
        return cls(1 + k * (chunk_len - 1), chunk_len)

    @property
    def k(self) -> int:
        return (self.f_total - 1) // (self.chunk_len - 1)

    def frame_range(self, j: int) -> tuple[int, int]:
        """Inclusive 1-based frame range of chunk j (1-based)."""
        if not 1 <= j <= self.k:
            raise LayoutError(f"chunk index {j} outside 1..{self.k}")
        f = self.chunk_len
        return 1 + (j - 1) * (f - 1), 1 + j * (f - 1)

    def frame_slice(self, j: int) -> slice:
        """0-based slice into the frame axis (reference excluded)."""
        lo, hi = self.frame_range(j)
        return slice(lo - 1, hi)

    def owned_slice(self, j: int) -> slice:
        """Frames first produced by chunk j: all of chunk 1, then all but the shared one."""
        lo, hi = self.frame_range(j)
        return slice(lo - 1 if j == 1 else lo, hi)

    def boundary_frames(self) -> list[int]:
        """1-based indices of frames shared by consecutive chunks."""
        return [self.frame_range(j)[1] for j in range(1, self.k)]


def segment(z: LatentSequence, chunk_len: int) -> list[LatentSequence]:
    layout = ChunkLayout(z.n_frames, chunk_len)
    return [
        LatentSequence(z.ref, np.ascontiguousarray(z.frames[:, :, layout.frame_slice(j)]))
        for j in range(1, layout.k + 1)
    ]


def stitch(chunks: list[LatentSequence]) -> LatentSequence:
    """Inverse of ``segment``; the earlier chunk's copy of each shared frame wins."""
    if not chunks:
        raise LayoutError("nothing to stitch")
    first = chunks[0].frames
    parts = [first]
    for c in chunks[1:]:
        if c.frames.shape[:2] != first.shape[:2] or c.frames.shape[3] != first.shape[3]:
            raise LayoutError(f"chunk shape {c.frames.shape} does not match {first.shape}")
        if c.frames.shape[FRAME_AXIS] != first.shape[FRAME_AXIS]:
            raise LayoutError("chunks must all have the same length")
        parts.append(c.frames[:, :, 1:])
    return LatentSequence(chunks[0].ref, np.concatenate(parts, axis=FRAME_AXIS))


def boundary_mismatch(chunks: list[LatentSequence]) -> list[float]:
    """L2 norm between the two copies of every shared boundary frame."""
    out = []
    for a, b in zip(chunks, chunks[1:]):
        d = a.frames[:, :, -1].astype(np.float64) - b.frames[:, :, 0].astype(np.float64)
        out.append(float(np.sqrt(np.sum(d * d))))
    return out


@dataclass(frozen=True)
class TimestepVector:
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 1 or v.size < 2:
            raise DomainError("timestep vector must be 1-D with a reference slot and frames")
        if v[0] != 0:
            raise DomainError("reference slot timestep must be 0")
        if np.any(v < 0) or np.any(v > 1):
            raise DomainError("timesteps must lie in [0, 1]")

    @property
    def frames(self) -> np.ndarray:
        return self.values[1:]


def _check_unit(ts) -> np.ndarray:
    ts = np.asarray(ts, dtype=np.float32).reshape(-1)
    if np.any(~np.isfinite(ts)) or np.any(ts < 0) or np.any(ts > 1):
        raise DomainError(f"per-chunk timesteps must lie in [0, 1], got {ts.tolist()}")
    return ts


def async_timesteps(k: int, f: int, per_chunk_t) -> TimestepVector:
    """``[0 | t_1 .. t_1 | ... | t_k .. t_k]`` over a ``k``-chunk layout of length ``f``.

    Shared boundary frames take the earlier chunk's timestep.
    """
    ts = _check_unit(per_chunk_t)
    if ts.size != k:
        raise DomainError(f"need {k} per-chunk timesteps, got {ts.size}")
    layout = ChunkLayout.for_chunks(k, f)
    out = np.zeros(1 + layout.f_total, dtype=np.float32)
    for j in range(1, k + 1):
        sl = layout.owned_slice(j)
        out[1 + sl.start : 1 + sl.stop] = ts[j - 1]
    return TimestepVector(out)


def chunk_timesteps(f: int, t: float) -> TimestepVector:
    """Timestep vector for one chunk view: ``[0, t, ..., t]`` (reference + f frames)."""
    ts = _check_unit([t])
    out = np.full(1 + f, ts[0], dtype=np.float32)
    out[0] = 0.0
    return TimestepVector(out)
