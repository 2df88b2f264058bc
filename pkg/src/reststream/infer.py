"""Chunk-by-chunk streaming generation with joint classifier-free guidance, the
matching non-streaming sampler, desk-scale quality metrics and the scaling bench."""

from __future__ import annotations

import contextlib
import csv
import gc
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .chunks import ChunkLayout, LatentSequence, stitch
from .codec import Clip, VideoCodec
from .config import Ablation, ModelConfig
from .dit import (
    IDContextCache,
    as_tensors,
    naive_history_bytes,
    reference_pass,
    reference_pass_flops,
    student_chunk_flops,
    student_forward,
    teacher_flops,
    teacher_forward,
)
from .flow import TimeSchedule, euler_step
from .rng import Rng
from .tensor import FlopCounter, Tensor, add, counting, no_grad, scale, sub


class StreamError(RuntimeError):
    pass


def joint_cfg(v_cond, v_uncond, alpha: float):
    """v_uncond + alpha * (v_cond - v_uncond). Accepts Tensors or arrays."""
    if isinstance(v_cond, Tensor) or isinstance(v_uncond, Tensor):
        vc = v_cond if isinstance(v_cond, Tensor) else Tensor(v_cond)
        vu = v_uncond if isinstance(v_uncond, Tensor) else Tensor(v_uncond)
        if vc.shape != vu.shape:
            raise StreamError(f"guidance branches differ in shape: {vc.dims} vs {vu.dims}")
        if alpha == 1.0:
            return vc
        return add(vu, scale(sub(vc, vu), alpha))
    vc, vu = np.asarray(v_cond), np.asarray(v_uncond)
    if vc.shape != vu.shape:
        raise StreamError(f"guidance branches differ in shape: {vc.shape} vs {vu.shape}")
    if alpha == 1.0:
        return vc
    return vu + np.float32(alpha) * (vc - vu)


def frame_noise(seed: int, index: int, cfg: ModelConfig) -> np.ndarray:
    """Initial noise of latent frame ``index`` (1-based); shared by every chunk containing it."""
    return Rng(seed).child("noise", index).normal((cfg.h, cfg.w, cfg.dv))


def sequence_noise(seed: int, n_frames: int, cfg: ModelConfig) -> np.ndarray:
    return np.stack([frame_noise(seed, i, cfg) for i in range(1, n_frames + 1)], axis=2)


def _zero_audio(audio: np.ndarray) -> np.ndarray:
    return np.zeros_like(audio)


class StreamSession:
    """One streaming generation: an ID sink, per-step context caches and a chunk counter.

    The conditional branch sees the audio and the ID sink; the unconditional
    branch sees zero audio and no sink and keeps its own context cache.
    """

    def __init__(self, params: dict[str, np.ndarray], cfg: ModelConfig, ref_latent: np.ndarray,
                 n_steps: int | None = None, alpha: float | None = None, seed: int = 0,
                 ablation: Ablation = Ablation()):
        self.cfg = cfg
        self.P = as_tensors(params)
        self.schedule = TimeSchedule.uniform(n_steps or cfg.steps)
        self.alpha = cfg.cfg_alpha if alpha is None else float(alpha)
        self.seed = seed
        self.ablation = ablation
        self.use_sink = not ablation.no_id_sink
        self.use_context = not ablation.no_context_cache
        self.cond = IDContextCache(cfg, self.schedule.n_steps)
        self.uncond = IDContextCache(cfg, self.schedule.n_steps) if self.alpha != 1.0 else None
        self.chunk = 0
        self.emitted: list[LatentSequence] = []
        ref = np.asarray(ref_latent, np.float32)
        if ref.shape != (cfg.h, cfg.w, 1, cfg.dv):
            raise StreamError(f"reference latent must be {(cfg.h, cfg.w, 1, cfg.dv)}, got {ref.shape}")
        self.ref = ref
        if self.use_sink:
            with no_grad():
                self.cond.write_sink(reference_pass(self.P, Tensor(ref), cfg))

    def _velocity(self, z: Tensor, audio: np.ndarray, t: float, step: int) -> Tensor:
        tc = np.full(self.cfg.chunk_len, t, np.float32)
        v_c = student_forward(self.P, z, Tensor(audio), tc, self.cond, step, self.cfg,
                              use_sink=self.use_sink, use_context=self.use_context)
        if self.uncond is None:
            return v_c
        v_u = student_forward(self.P, z, Tensor(_zero_audio(audio)), tc, self.uncond, step, self.cfg,
                              use_sink=False, use_context=self.use_context)
        return joint_cfg(v_c, v_u, self.alpha)

    def next_chunk(self, audio_chunk: np.ndarray) -> np.ndarray:
        """Denoise the next chunk [h, w, f, dv] from its audio slots [f, hw, d_A]."""
        f = self.cfg.chunk_len
        if audio_chunk.shape[0] != f:
            raise StreamError(f"chunk audio must cover {f} latent frames, got {audio_chunk.shape[0]}")
        self.chunk += 1
        first = 1 + (self.chunk - 1) * (f - 1)
        z = Tensor(np.stack([frame_noise(self.seed, first + i, self.cfg) for i in range(f)], axis=2))
        with no_grad():
            for s, (t_from, t_to) in enumerate(self.schedule.pairs()):
                v = self._velocity(z, audio_chunk, t_from, s)
                z = euler_step(z, v, t_from, t_to)
        for cache in (self.cond, self.uncond):
            if cache is not None:
                cache.chunk_index = self.chunk
        out = z.numpy()
        self.emitted.append(LatentSequence(self.ref, out))
        return out

    def cache_bytes(self) -> int:
        return self.cond.nbytes() + (self.uncond.nbytes() if self.uncond is not None else 0)

    def latents(self) -> np.ndarray:
        if not self.emitted:
            raise StreamError("no chunks generated yet")
        return stitch(self.emitted).frames


# -- metrics ------------------------------------------------------------------

@dataclass
class MetricsReport:
    boundary_discontinuity: float = 0.0
    interior_discontinuity: float = 0.0
    identity_drift: list[float] = field(default_factory=list)
    sync_proxy: float = 0.0
    per_chunk_latency_ms: list[float] = field(default_factory=list)
    cache_bytes: list[int] = field(default_factory=list)

    @property
    def identity_mean(self) -> float:
        return float(np.mean(self.identity_drift)) if self.identity_drift else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["identity_mean"] = self.identity_mean
        return d


def second_difference_norms(latents: np.ndarray) -> np.ndarray:
    """||z_{n+1} - 2 z_n + z_{n-1}|| for n = 1 .. N-2 (0-based), latents [h, w, N, c]."""
    z = latents.astype(np.float64)
    d = z[:, :, 2:] - 2 * z[:, :, 1:-1] + z[:, :, :-2]
    return np.sqrt(np.sum(d * d, axis=(0, 1, 3)))


def boundary_positions(layout: ChunkLayout) -> list[int]:
    """0-based frames whose second difference straddles a chunk boundary.

    Around a shared frame b these are b (neighbours from both chunks) and b+1
    (the first new frame of the later chunk, whose stencil reaches back into
    the earlier chunk).
    """
    out = []
    for b in layout.boundary_frames():
        b0 = b - 1
        out.extend(n for n in (b0, b0 + 1) if 1 <= n <= layout.f_total - 2)
    return sorted(set(out))


def boundary_discontinuity(latents: np.ndarray, layout: ChunkLayout) -> tuple[float, float]:
    """(mean second-difference norm at boundary frames, mean at the remaining interior frames)."""
    norms = second_difference_norms(latents)
    pos = boundary_positions(layout)
    idx = np.arange(1, layout.f_total - 1)
    bmask = np.isin(idx, pos)
    b = float(norms[bmask].mean()) if bmask.any() else 0.0
    i = float(norms[~bmask].mean()) if (~bmask).any() else 0.0
    return b, i


def identity_statistics(frame: np.ndarray, threshold: float = 0.125) -> np.ndarray:
    """Background colour (per-channel median) and foreground colour (median of
    pixels whose colour differs from the background by more than ``threshold``
    in some channel), concatenated to a 6-vector."""
    px = frame.reshape(-1, frame.shape[-1]).astype(np.float64)
    bg = np.median(px, axis=0)
    far = np.max(np.abs(px - bg), axis=1) > threshold
    fg = np.median(px[far], axis=0) if far.any() else bg
    return np.concatenate([bg, fg])


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def latent_to_pixel_frames(n: int, rF: int) -> range:
    """Pixel frames covered by 0-based latent frame ``n`` (frame 0 is the lone first frame)."""
    return range(0, 1) if n == 0 else range(1 + (n - 1) * rF, 1 + n * rF)


def aperture_estimate(video: np.ndarray, reference: np.ndarray, head, mouth) -> np.ndarray:
    """Per-frame mouth area change relative to the reference, read off the
    summed colour shift along (mouth - head).

    The per-channel median shift is removed first: most pixels are unchanged
    background, so this cancels global colour drift without touching exact frames.
    """
    axis = np.asarray(mouth, np.float64) - np.asarray(head, np.float64)
    diff = video.astype(np.float64) - reference.astype(np.float64)  # [H, W, F, C]
    diff = diff - np.median(diff, axis=(0, 1), keepdims=True)
    return diff.sum(axis=(0, 1)) @ axis / (axis @ axis)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64) - np.mean(a)
    b = np.asarray(b, np.float64) - np.mean(b)
    den = np.sqrt((a @ a) * (b @ b))
    return float(a @ b / den) if den > 0 else 0.0


def evaluate(video: np.ndarray, clip: Clip, layout: ChunkLayout, latents: np.ndarray | None = None,
             rF: int = 4, codec: VideoCodec | None = None) -> MetricsReport:
    """Quality proxies for a decoded video [H, W, F, 3] of a synthetic clip."""
    if latents is None:
        if codec is None:
            raise StreamError("boundary metric needs latents or a codec to encode the video")
        latents = codec.encode(video)
    b, i = boundary_discontinuity(latents, layout)
    ref_stats = identity_statistics(clip.reference[:, :, 0])
    drift = []
    for j in range(1, layout.k + 1):
        sl = layout.owned_slice(j)
        frames = [p for n in range(sl.start, sl.stop) for p in latent_to_pixel_frames(n, rF)]
        drift.append(float(np.mean([_cos(identity_statistics(video[:, :, p]), ref_stats) for p in frames])))
    ap = aperture_estimate(video, clip.reference, clip.head_color, clip.mouth_color)
    return MetricsReport(boundary_discontinuity=b, interior_discontinuity=i, identity_drift=drift,
                         sync_proxy=pearson(ap, clip.envelope[: video.shape[2]]))


# -- generation ------------------------------------------------------------------

@dataclass
class Generation:
    latents: np.ndarray
    video: np.ndarray | None
    report: MetricsReport
    chunks: list[np.ndarray]


def generate(params: dict[str, np.ndarray], cfg: ModelConfig, ref_latent: np.ndarray, audio: np.ndarray, *,
             steps: int | None = None, alpha: float | None = None, seed: int = 0,
             ablation: Ablation = Ablation(), codec: VideoCodec | None = None, clip: Clip | None = None) -> Generation:
    """Stream every chunk of the sequence implied by ``audio`` [N, hw, d_A]."""
    layout = ChunkLayout(audio.shape[0], cfg.chunk_len)
    t0 = time.perf_counter()
    session = StreamSession(params, cfg, ref_latent, steps, alpha, seed, ablation)
    chunks, lat, mem = [], [], []
    for j in range(1, layout.k + 1):
        chunks.append(session.next_chunk(audio[layout.frame_slice(j)]))
        t1 = time.perf_counter()
        lat.append((t1 - t0) * 1e3)
        t0 = t1
        mem.append(session.cache_bytes())
    latents = session.latents()
    video = codec.decode(latents) if codec is not None else None
    if video is not None and clip is not None:
        report = evaluate(video, clip, layout, latents, codec.shape.rF)
    else:
        report = MetricsReport()
        report.boundary_discontinuity, report.interior_discontinuity = boundary_discontinuity(latents, layout)
    report.per_chunk_latency_ms = lat
    report.cache_bytes = mem
    return Generation(latents, video, report, chunks)


def sample_teacher(params: dict[str, np.ndarray], cfg: ModelConfig, ref_latent: np.ndarray, audio: np.ndarray, *,
                   steps: int | None = None, alpha: float | None = None, seed: int = 0,
                   ablation: Ablation = Ablation()) -> np.ndarray:
    """Non-streaming sampling: all frames denoised together with full attention."""
    P = as_tensors(params)
    N = audio.shape[0]
    schedule = TimeSchedule.uniform(steps or cfg.steps)
    alpha = cfg.cfg_alpha if alpha is None else float(alpha)
    use_sink = not ablation.no_id_sink
    ref = Tensor(np.asarray(ref_latent, np.float32))
    z = Tensor(sequence_noise(seed, N, cfg))
    with no_grad():
        sink = reference_pass(P, ref, cfg)
        for t_from, t_to in schedule.pairs():
            tv = np.full(N, t_from, np.float32)
            v = teacher_forward(P, ref, z, Tensor(audio), tv, cfg, use_sink=use_sink, sink=sink)
            if alpha != 1.0:
                v_u = teacher_forward(P, ref, z, Tensor(_zero_audio(audio)), tv, cfg, use_sink=False, sink=sink)
                v = joint_cfg(v, v_u, alpha)
            z = euler_step(z, v, t_from, t_to)
    return z.numpy()


# -- scaling bench -------------------------------------------------------------

BENCH_FIELDS = ["chunk", "wall_ms", "flops", "flops_analytic", "cache_bytes", "naive_cache_bytes"]


@dataclass
class BenchResult:
    rows: list[dict]
    ttfc_ms: float
    teacher_ms: dict[int, float]
    teacher_flops: dict[int, int]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
            w.writeheader()
            w.writerows(self.rows)

    def wall_variation(self, skip: int = 1) -> float:
        """Largest relative deviation of a per-chunk wall time from the median,
        after ``skip`` warmup chunks."""
        t = np.array([r["wall_ms"] for r in self.rows[skip:]])
        if not t.size:
            return 0.0
        med = np.median(t)
        return float(np.max(np.abs(t - med)) / med)

    def wall_spread(self, skip: int = 1) -> float:
        """(max - min) / median of the per-chunk wall times; stricter, reported alongside."""
        t = np.array([r["wall_ms"] for r in self.rows[skip:]])
        return float((t.max() - t.min()) / np.median(t)) if t.size else 0.0


@contextlib.contextmanager
def _gc_paused():
    """Keep the cyclic garbage collector out of timed regions, as ``timeit`` does."""
    was = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was:
            gc.enable()


def bench_stream(params: dict[str, np.ndarray], cfg: ModelConfig, n_chunks: int = 16, repeats: int = 3,
                 steps: int | None = None, alpha: float | None = None, teacher_chunks=(2,),
                 seed: int = 0) -> BenchResult:
    """Per-chunk wall time (min over ``repeats`` sessions), counted FLOPs and cache
    bytes, plus time-to-first-chunk against non-streaming sampling."""
    n_steps = steps or cfg.steps
    alpha = cfg.cfg_alpha if alpha is None else float(alpha)
    branches = 1 if alpha == 1.0 else 2
    N = 1 + n_chunks * (cfg.chunk_len - 1)
    audio = Rng(seed).child("bench-audio").normal((N, cfg.audio_tokens, cfg.d_audio))
    ref = Rng(seed).child("bench-ref").normal((cfg.h, cfg.w, 1, cfg.dv))
    layout = ChunkLayout(N, cfg.chunk_len)
    walls = np.full((repeats, n_chunks), np.inf)
    flops = [0] * n_chunks
    mem = [0] * n_chunks
    ttfc = np.inf
    with _gc_paused():
        for r in range(repeats):
            t0 = time.perf_counter()
            session = StreamSession(params, cfg, ref, n_steps, alpha, seed)
            for j in range(1, n_chunks + 1):
                counter = FlopCounter()
                s = time.perf_counter()
                with counting(counter):
                    session.next_chunk(audio[layout.frame_slice(j)])
                e = time.perf_counter()
                walls[r, j - 1] = (e - s) * 1e3
                if j == 1:
                    ttfc = min(ttfc, (e - t0) * 1e3)
                flops[j - 1] = counter.flops
                mem[j - 1] = session.cache_bytes()
    analytic = branches * n_steps * student_chunk_flops(cfg)
    rows = [
        {"chunk": j + 1, "wall_ms": float(walls[:, j].min()), "flops": flops[j], "flops_analytic": analytic,
         "cache_bytes": mem[j], "naive_cache_bytes": branches * naive_history_bytes(cfg, n_steps, j + 1)}
        for j in range(n_chunks)
    ]
    t_ms, t_fl = {}, {}
    for k in teacher_chunks:
        Nk = 1 + k * (cfg.chunk_len - 1)
        best = np.inf
        with _gc_paused():
            for _ in range(max(1, repeats)):
                s = time.perf_counter()
                sample_teacher(params, cfg, ref, audio[:Nk], steps=n_steps, alpha=alpha, seed=seed)
                best = min(best, (time.perf_counter() - s) * 1e3)
        t_ms[k] = float(best)
        ref_fl = reference_pass_flops(cfg)
        t_fl[k] = branches * n_steps * (teacher_flops(cfg, Nk) - ref_fl) + ref_fl
    return BenchResult(rows, float(ttfc), t_ms, t_fl)
