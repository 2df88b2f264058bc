"""Two-stage training: asynchronous non-streaming teacher, then streaming student
distillation with contrastive and second-difference smoothness terms."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import formats
from .chunks import ChunkLayout, async_timesteps
from .codec import Clip, SpeechCodec, VideoCodec
from .config import Ablation, ModelConfig, TrainConfig
from .dit import IDContextCache, as_tensors, reference_pass, student_forward, teacher_forward
from .flow import add_noise, flow_target, fm_loss
from .optim import AdamState, adam_step, clip_by_global_norm
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    concat,
    cosine_matrix,
    logsumexp,
    mean,
    mul,
    no_grad,
    reshape,
    scale,
    sub,
    sum_,
    take,
    transpose,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; carries the offending step's diagnostics."""


class FlowDomainError(ValueError):
    pass


# -- data ----------------------------------------------------------------------

@dataclass
class LatentClip:
    clip_id: str
    ref: np.ndarray      # [h, w, 1, dv]
    frames: np.ndarray   # [h, w, N, dv]
    audio: np.ndarray    # [N, hw, d_A]
    source: Clip | None = None


def encode_corpus(clips: list[Clip], vcodec: VideoCodec, scodec: SpeechCodec) -> list[LatentClip]:
    out = []
    for c in clips:
        frames = vcodec.encode(c.video)
        audio = scodec.encode(c.features)
        if audio.shape[0] != frames.shape[2]:
            raise FlowDomainError(f"{c.clip_id}: {audio.shape[0]} audio slots vs {frames.shape[2]} latent frames")
        out.append(LatentClip(c.clip_id, vcodec.encode(c.reference), frames, audio, c))
    return out


@dataclass
class Batch:
    ref: np.ndarray
    z0: np.ndarray          # [h, w, N, dv]
    audio: np.ndarray       # [N, hw, d_A]
    per_chunk_t: np.ndarray  # [k]
    eps: np.ndarray         # [h, w, N, dv]
    drop_audio: bool = False
    drop_sink: bool = False


def sample_batch(corpus: list[LatentClip], cfg: ModelConfig, tcfg: TrainConfig, step: int) -> Batch:
    """Everything random about one step is drawn from (seed, step), so resuming is exact."""
    r = Rng(tcfg.seed).child("step", step)
    clip = corpus[int(r.child("clip").integers(0, len(corpus)))]
    layout = ChunkLayout(clip.frames.shape[2], cfg.chunk_len)
    u = r.child("drop").uniform(2)
    return Batch(
        ref=clip.ref,
        z0=clip.frames,
        audio=clip.audio,
        per_chunk_t=r.child("t").uniform(layout.k),
        eps=r.child("eps").normal(clip.frames.shape),
        drop_audio=bool(u[0] < tcfg.audio_drop),
        drop_sink=bool(u[1] < tcfg.sink_drop),
    )


# -- distillation losses -------------------------------------------------------

@dataclass
class FlowPair:
    """Teacher and student flows over the same frames, each [h, w, F, c]."""

    teacher: Tensor
    student: Tensor

    def __post_init__(self):
        if self.teacher.shape != self.student.shape:
            raise FlowDomainError(f"flow shapes differ: {self.teacher.dims} vs {self.student.dims}")

    @property
    def n_frames(self) -> int:
        return self.teacher.shape[2]

    @staticmethod
    def per_frame(v: Tensor) -> Tensor:
        """[h, w, F, c] -> [F, h*w*c]"""
        h, w, F, c = v.shape
        return reshape(transpose(v, (2, 0, 1, 3)), (F, h * w * c))


def contrastive_loss(pair: FlowPair, tau: float, variant: str = "printed") -> Tensor:
    """-(1/f) sum_i log( exp(s_ii / tau) / sum_{j != i} exp(s_ij / tau) ), s = cosine.

    ``variant="infonce"`` keeps the positive in the denominator (standard InfoNCE).
    """
    f = pair.n_frames
    if f < 2:
        raise FlowDomainError(f"contrastive loss needs at least 2 frames, got {f}")
    if tau <= 0:
        raise FlowDomainError("temperature must be positive")
    sims = scale(cosine_matrix(FlowPair.per_frame(pair.student), FlowPair.per_frame(pair.teacher)), 1.0 / tau)
    eye = np.eye(f, dtype=np.float32)
    pos = sum_(mul(sims, Tensor(eye)), axis=1)
    if variant == "printed":
        denom = logsumexp(add(sims, Tensor(eye * np.float32(-1e9))), axis=1)
    elif variant == "infonce":
        denom = logsumexp(sims, axis=1)
    else:
        raise FlowDomainError(f"unknown contrastive variant {variant!r}")
    return mean(sub(denom, pos))


def second_difference(v: Tensor) -> Tensor:
    """Delta_i = v_{i+1} - 2 v_i + v_{i-1} along the frame axis -> [h, w, F-2, c]."""
    F = v.shape[2]
    a = take(v, (slice(None), slice(None), slice(2, F)))
    b = take(v, (slice(None), slice(None), slice(1, F - 1)))
    c = take(v, (slice(None), slice(None), slice(0, F - 2)))
    return add(sub(a, scale(b, 2.0)), c)


def smoothness_loss(pair: FlowPair, variant: str = "divergence") -> Tensor:
    """(1/(f-2)) sum_i ||Delta student_i - Delta teacher_i||^2.

    ``variant="literal"`` returns the element sum of sum_i Delta(student - teacher)_i,
    a signed quantity kept only for auditing.
    """
    f = pair.n_frames
    if f < 3:
        raise FlowDomainError(f"smoothness loss needs at least 3 frames, got {f}")
    if variant == "literal":
        return sum_(second_difference(sub(pair.student, pair.teacher)))
    if variant != "divergence":
        raise FlowDomainError(f"unknown smoothness variant {variant!r}")
    d = sub(second_difference(pair.student), second_difference(pair.teacher))
    return scale(sum_(mul(d, d)), 1.0 / (f - 2))


# -- single steps ----------------------------------------------------------------

@dataclass
class StepLosses:
    student: float
    contrastive: float
    smooth: float
    total: float
    grad_norm: float = 0.0


def _teacher_inputs(batch: Batch, cfg: ModelConfig):
    layout = ChunkLayout(batch.z0.shape[2], cfg.chunk_len)
    tvec = async_timesteps(layout.k, cfg.chunk_len, batch.per_chunk_t)
    zt = add_noise(batch.z0, batch.eps, tvec.frames)
    audio = np.zeros_like(batch.audio) if batch.drop_audio else batch.audio
    return layout, tvec, zt, Tensor(audio)


def teacher_loss(P: dict[str, Tensor], batch: Batch, cfg: ModelConfig, ablation: Ablation = Ablation()) -> Tensor:
    _, tvec, zt, audio = _teacher_inputs(batch, cfg)
    use_sink = not (batch.drop_sink or ablation.no_id_sink)
    v_hat = teacher_forward(P, Tensor(batch.ref), zt, audio, tvec.frames, cfg, use_sink=use_sink)
    return fm_loss(v_hat, flow_target(batch.z0, batch.eps))


def student_pass(P: dict[str, Tensor], batch: Batch, cfg: ModelConfig, ablation: Ablation = Ablation()):
    """Feed the chunks through the student in order, exactly as at inference.

    Each chunk view is noised at its own chunk timestep (with the shared noise
    draw), so a chunk's shared first frame sits at that chunk's noise level as
    it does during sampling. Returns (L_S, stitched student flow).
    """
    layout = ChunkLayout(batch.z0.shape[2], cfg.chunk_len)
    use_sink = not (batch.drop_sink or ablation.no_id_sink)
    cache = IDContextCache(cfg, 1)
    if use_sink:
        cache.write_sink(reference_pass(P, Tensor(batch.ref), cfg))
    audio = np.zeros_like(batch.audio) if batch.drop_audio else batch.audio
    preds, targets, owned = [], [], []
    for j in range(1, layout.k + 1):
        sl = layout.frame_slice(j)
        z0c, epsc = batch.z0[:, :, sl], batch.eps[:, :, sl]
        t = float(batch.per_chunk_t[j - 1])
        tc = np.full(cfg.chunk_len, t, np.float32)
        v = student_forward(P, add_noise(z0c, epsc, tc), Tensor(audio[sl]), tc, cache, 0, cfg,
                            use_sink=use_sink, use_context=not ablation.no_context_cache)
        preds.append(v)
        targets.append(flow_target(z0c, epsc))
        owned.append(v if j == 1 else take(v, (slice(None), slice(None), slice(1, None))))
    loss = fm_loss(concat(preds, axis=2), concat(targets, axis=2))
    return loss, concat(owned, axis=2)


def student_losses(P: dict[str, Tensor], teacher_P: dict[str, Tensor] | None, batch: Batch, cfg: ModelConfig,
                   tcfg: TrainConfig, ablation: Ablation = Ablation()):
    """Returns (total, L_S, L_CON, L_SMO) as tensors; the teacher runs without gradients."""
    l_s, v_student = student_pass(P, batch, cfg, ablation)
    zero = Tensor(np.float32(0.0))
    if ablation.no_asd or (ablation.no_contrastive and ablation.no_smooth):
        return l_s, l_s, zero, zero
    if teacher_P is None:
        raise TrainingError("distillation terms need a teacher")
    with no_grad():
        _, tvec, zt, audio = _teacher_inputs(batch, cfg)
        use_sink = not (batch.drop_sink or ablation.no_id_sink)
        v_teacher = teacher_forward(teacher_P, Tensor(batch.ref), zt, audio, tvec.frames, cfg, use_sink=use_sink)
    pair = FlowPair(v_teacher, v_student)
    l_con = zero if ablation.no_contrastive else contrastive_loss(pair, tcfg.tau, tcfg.contrastive_variant)
    l_smo = zero if ablation.no_smooth else smoothness_loss(pair, tcfg.smooth_variant)
    total = l_s
    if not ablation.no_contrastive:
        total = add(total, scale(l_con, tcfg.lambda_con))
    if not ablation.no_smooth:
        total = add(total, scale(l_smo, tcfg.lambda_smo))
    return total, l_s, l_con, l_smo


def _apply(params, tensors, loss: Tensor, state: AdamState, tcfg: TrainConfig, step: int, what: str):
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"{what} step {step}: non-finite loss {value}")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"{what} step {step}: non-finite gradients in {bad[:5]}")
    grads, norm = clip_by_global_norm(grads, tcfg.grad_clip)
    new_params, state = adam_step(params, grads, state, tcfg.lr)
    return new_params, state, norm


def teacher_step(params: dict[str, np.ndarray], state: AdamState, batch: Batch, cfg: ModelConfig,
                 tcfg: TrainConfig, ablation: Ablation = Ablation()):
    P = as_tensors(params, requires_grad=True)
    loss = teacher_loss(P, batch, cfg, ablation)
    params, state, norm = _apply(params, P, loss, state, tcfg, state.step, "teacher")
    v = loss.item()
    return StepLosses(v, 0.0, 0.0, v, norm), params, state


def student_step(params: dict[str, np.ndarray], teacher_params: dict[str, np.ndarray] | None, state: AdamState,
                 batch: Batch, cfg: ModelConfig, tcfg: TrainConfig, ablation: Ablation = Ablation()):
    P = as_tensors(params, requires_grad=True)
    TP = as_tensors(teacher_params) if teacher_params is not None else None
    total, l_s, l_con, l_smo = student_losses(P, TP, batch, cfg, tcfg, ablation)
    params, state, norm = _apply(params, P, total, state, tcfg, state.step, "student")
    return StepLosses(l_s.item(), l_con.item(), l_smo.item(), total.item(), norm), params, state


# -- loops, checkpoints, curves -----------------------------------------------------

CURVE_FIELDS = ["step", "L_S", "L_CON", "L_SMO", "total", "grad_norm"]


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    state: AdamState
    curve: list[StepLosses] = field(default_factory=list)


def checkpoint_state(params: dict[str, np.ndarray], state: AdamState | None = None, prefix: str = "param/") -> dict:
    out = {prefix + k: v for k, v in params.items()}
    if state is not None:
        out.update({"adam.m/" + k: v for k, v in state.m.items()})
        out.update({"adam.v/" + k: v for k, v in state.v.items()})
        out["meta/step"] = np.array([state.step], np.float32)
    return out


def save_training_checkpoint(path: str | Path, params, state: AdamState | None = None) -> None:
    formats.save_checkpoint(path, checkpoint_state(params, state))


def load_training_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], AdamState]:
    raw = formats.load_checkpoint(path)
    params = {k[len("param/"):]: v for k, v in raw.items() if k.startswith("param/")}
    m = {k[len("adam.m/"):]: v for k, v in raw.items() if k.startswith("adam.m/")}
    v = {k[len("adam.v/"):]: v for k, v in raw.items() if k.startswith("adam.v/")}
    step = int(raw["meta/step"][0]) if "meta/step" in raw else 0
    return params, AdamState(step=step, m=m, v=v)


def _run(step_fn: Callable, params, state: AdamState, corpus, cfg: ModelConfig, tcfg: TrainConfig,
         out_dir: Path | None, tag: str) -> TrainResult:
    curve: list[StepLosses] = []
    writer = None
    fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / f"{tag}_loss.csv", "a" if state.step else "w", newline="")
        writer = csv.writer(fh)
        if not state.step:
            writer.writerow(CURVE_FIELDS)
    try:
        while state.step < tcfg.steps:
            step = state.step
            batch = sample_batch(corpus, cfg, tcfg, step)
            losses, params, state = step_fn(params, state, batch)
            curve.append(losses)
            if writer is not None:
                writer.writerow([step, losses.student, losses.contrastive, losses.smooth, losses.total, losses.grad_norm])
            if tcfg.log_every and step % tcfg.log_every == 0:
                log.info("%s step %d total %.5f L_S %.5f", tag, step, losses.total, losses.student)
            if out_dir is not None and tcfg.checkpoint_every and state.step % tcfg.checkpoint_every == 0:
                save_training_checkpoint(out_dir / f"{tag}_step{state.step:06d}.ckpt", params, state)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_training_checkpoint(out_dir / f"{tag}.ckpt", params, state)
    return TrainResult(params, state, curve)


def train_teacher(corpus: list[LatentClip], cfg: ModelConfig, tcfg: TrainConfig, init: dict[str, np.ndarray],
                  out_dir: str | Path | None = None, state: AdamState | None = None,
                  ablation: Ablation = Ablation()) -> TrainResult:
    def fn(p, s, b):
        return teacher_step(p, s, b, cfg, tcfg, ablation)

    return _run(fn, dict(init), state or AdamState(), corpus, cfg, tcfg,
                Path(out_dir) if out_dir else None, "teacher")


def train_student(corpus: list[LatentClip], cfg: ModelConfig, tcfg: TrainConfig, teacher: dict[str, np.ndarray],
                  ablation: Ablation = Ablation(), out_dir: str | Path | None = None,
                  init: dict[str, np.ndarray] | None = None, state: AdamState | None = None) -> TrainResult:
    """Stage 2. The student starts from the teacher's weights unless ``init`` is given."""
    frozen = {k: v.copy() for k, v in teacher.items()}

    def fn(p, s, b):
        return student_step(p, None if ablation.no_asd else frozen, s, b, cfg, tcfg, ablation)

    return _run(fn, dict(init if init is not None else teacher), state or AdamState(), corpus, cfg, tcfg,
                Path(out_dir) if out_dir else None, "student")
