"""End-to-end plumbing shared by the CLI and the acceptance suite: synthetic
corpus, codecs, latent corpus, teacher, students and paired evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import formats
from .codec import (
    Clip,
    SpeechCodec,
    SpeechShape,
    VideoCodec,
    VideoShape,
    make_synthetic_corpus,
    train_speech_codec,
    train_video_codec,
)
from .config import Ablation, DataConfig, ModelConfig, RunConfig, TrainConfig
from .dit import init_params
from .infer import MetricsReport, generate
from .rng import Rng
from .train import LatentClip, encode_corpus, train_student, train_teacher

log = logging.getLogger(__name__)


@dataclass
class Data:
    train_clips: list[Clip]
    eval_clips: list[Clip]
    vcodec: VideoCodec
    scodec: SpeechCodec
    train: list[LatentClip]
    eval: list[LatentClip]


def shapes(data: DataConfig, model: ModelConfig) -> tuple[VideoShape, SpeechShape]:
    n_latent = 1 + data.chunks * (model.chunk_len - 1)
    vs = VideoShape.for_latent_frames(n_latent, H=data.H, W=data.W, dv=model.dv)
    ss = SpeechShape(F=vs.F, Hw=vs.rF, hw=model.audio_tokens, d_A=model.d_audio)
    if vs.h != model.h or vs.w != model.w:
        raise ValueError(f"video {data.H}x{data.W} gives a {vs.h}x{vs.w} latent grid, model expects {model.h}x{model.w}")
    return vs, ss


def build_data(data: DataConfig, model: ModelConfig) -> Data:
    vs, ss = shapes(data, model)
    clips = make_synthetic_corpus(data.seed, data.n_clips + data.n_eval_clips, vs, ss)
    train_clips, eval_clips = clips[: data.n_clips], clips[data.n_clips:]
    vc = VideoCodec.init(vs, Rng(data.seed).child("video-codec-init"))
    train_video_codec(vc, [c.video for c in train_clips], steps=data.codec_steps, seed=data.seed)
    sc = SpeechCodec.init(ss, Rng(data.seed).child("speech-codec-init"))
    train_speech_codec(sc, [c.features for c in train_clips], steps=data.codec_steps, seed=data.seed)
    return Data(train_clips, eval_clips, vc, sc, encode_corpus(train_clips, vc, sc), encode_corpus(eval_clips, vc, sc))


def initial_params(model: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    return init_params(model, Rng(seed).child("init"))


def fit_teacher(data: Data, run: RunConfig, steps: int | None = None) -> dict[str, np.ndarray]:
    tcfg = run.train if steps is None else _with_steps(run.train, steps)
    return train_teacher(data.train, run.model, tcfg, initial_params(run.model, run.train.seed)).params


def fit_student(data: Data, run: RunConfig, teacher: dict[str, np.ndarray], ablation: Ablation,
                steps: int | None = None) -> dict[str, np.ndarray]:
    tcfg = run.train if steps is None else _with_steps(run.train, steps)
    return train_student(data.train, run.model, tcfg, teacher, ablation).params


def _with_steps(t: TrainConfig, steps: int) -> TrainConfig:
    return replace(t, steps=steps)


@dataclass
class EvalSummary:
    identity: float
    boundary: float
    interior: float
    sync: float
    reports: list[MetricsReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"identity": self.identity, "boundary": self.boundary, "interior": self.interior, "sync": self.sync}


def evaluate_params(params: dict[str, np.ndarray], data: Data, model: ModelConfig, ablation: Ablation = Ablation(),
                    seeds=(0,), alpha: float | None = None, steps: int | None = None) -> EvalSummary:
    """Stream every held-out clip for every sampling seed and average the metrics."""
    reports = []
    for clip, lat in zip(data.eval_clips, data.eval):
        for s in seeds:
            g = generate(params, model, lat.ref, lat.audio, steps=steps, alpha=alpha, seed=s,
                         ablation=ablation, codec=data.vcodec, clip=clip)
            reports.append(g.report)
    return EvalSummary(
        identity=float(np.mean([r.identity_mean for r in reports])),
        boundary=float(np.mean([r.boundary_discontinuity for r in reports])),
        interior=float(np.mean([r.interior_discontinuity for r in reports])),
        sync=float(np.mean([r.sync_proxy for r in reports])),
        reports=reports,
    )


# -- persistence -------------------------------------------------------------------

def save_codecs(path, vcodec: VideoCodec, scodec: SpeechCodec) -> None:
    path = Path(path)
    formats.save_checkpoint(path, {**vcodec.state(), **scodec.state()})
    meta = {"video_shape": asdict(vcodec.shape), "speech_shape": asdict(scodec.shape)}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_codecs(path) -> tuple[VideoCodec, SpeechCodec]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    raw = formats.load_checkpoint(path)
    vs = VideoShape(**meta["video_shape"])
    ss = SpeechShape(**meta["speech_shape"])
    vp = {k[len("video."):]: v for k, v in raw.items() if k.startswith("video.")}
    sp = {k[len("speech."):]: v for k, v in raw.items() if k.startswith("speech.")}
    return VideoCodec(vs, vp), SpeechCodec(ss, sp)


# -- paired ablation study ------------------------------------------------------------

ABLATION_VARIANTS = ("full", "no_id_sink", "no_context_cache", "no_asd", "no_contrastive")


@dataclass
class AblationStudy:
    results: dict[str, EvalSummary]
    seconds: dict[str, float]
    alpha: float
    seeds: tuple

    def directions(self) -> dict[str, tuple[bool, float, float]]:
        """(holds, full value, ablated value) for each directional claim."""
        r = self.results
        full = r["full"]
        return {
            "a: no_id_sink worse identity": (r["no_id_sink"].identity < full.identity,
                                             full.identity, r["no_id_sink"].identity),
            "b: no_context_cache worse boundary": (r["no_context_cache"].boundary > full.boundary,
                                                   full.boundary, r["no_context_cache"].boundary),
            "c: full ASD lower boundary than no_asd": (full.boundary < r["no_asd"].boundary,
                                                       full.boundary, r["no_asd"].boundary),
            "d: no_contrastive worse sync": (r["no_contrastive"].sync < full.sync,
                                             full.sync, r["no_contrastive"].sync),
        }

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "seeds": list(self.seeds),
            "results": {k: v.to_dict() for k, v in self.results.items()},
            "seconds": self.seconds,
            "directions": {k: {"holds": ok, "full": a, "ablated": b} for k, (ok, a, b) in self.directions().items()},
        }


def ablation_study(data: Data, run: RunConfig, *, teacher_steps: int, teacher_lr: float, student_steps: int,
                   student_lr: float, alpha: float, seeds=(0, 1), teacher: dict[str, np.ndarray] | None = None,
                   variants=ABLATION_VARIANTS) -> AblationStudy:
    """One teacher, then one student per variant from the same teacher and seed,
    each evaluated on every held-out clip and sampling seed."""
    import time

    seconds = {}
    if teacher is None:
        t0 = time.perf_counter()
        trun = replace(run, train=replace(run.train, steps=teacher_steps, lr=teacher_lr))
        teacher = fit_teacher(data, trun)
        seconds["teacher"] = time.perf_counter() - t0
    srun = replace(run, train=replace(run.train, steps=student_steps, lr=student_lr))
    results = {}
    for name in variants:
        ab = Ablation() if name == "full" else Ablation.from_flags([name])
        t0 = time.perf_counter()
        student = fit_student(data, srun, teacher, ab)
        results[name] = evaluate_params(student, data, run.model, ab, seeds=seeds, alpha=alpha)
        seconds[name] = time.perf_counter() - t0
        log.info("ablation %s: %s", name, results[name].to_dict())
    return AblationStudy(results, seconds, alpha, tuple(seeds))
