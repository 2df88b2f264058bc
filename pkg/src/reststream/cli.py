"""Command-line entry point.

All artifacts of a run live under one directory (``--run``)::

    corpus/            synthetic clips (RESTTNSR) + manifest.json
    codecs.ckpt        video and speech codec weights (+ codecs.json shapes)
    teacher/           teacher.ckpt, teacher_loss.csv, config.json
    students/<tag>/    student.ckpt, student_loss.csv, config.json
    generate/<tag>/    latents.tnsr, video.vidf, metrics.json, config.json
    bench/             bench.csv, summary.json

Exit codes: 0 ok, 1 validation error, 2 numerical abort, 3 I/O error.
"""

from __future__ import annotations

import os

if "REST_THREADS" in os.environ:  # must happen before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["REST_THREADS"])

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import formats
from .codec import load_corpus, save_corpus, make_synthetic_corpus
from .config import Ablation, ConfigError, RunConfig, load_config
from .infer import bench_stream, generate
from .pipeline import build_data, initial_params, load_codecs, save_codecs, shapes, Data
from .train import (
    TrainingError,
    encode_corpus,
    load_training_checkpoint,
    train_student,
    train_teacher,
)

log = logging.getLogger("reststream")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("gen-corpus", "train-codec", "train-teacher", "distill", "generate", "bench", "verify", "ablate")


# -- config resolution --------------------------------------------------------------

def resolve_config(args: argparse.Namespace) -> RunConfig:
    run = load_config(args.config)
    train, model, data = {}, {}, {}
    if args.seed is not None:
        train["seed"] = args.seed
        data["seed"] = args.seed
    for name in ("steps", "lr"):
        if getattr(args, name, None) is not None:
            train[name] = getattr(args, name)
    if getattr(args, "chunk_len", None) is not None:
        model["chunk_len"] = args.chunk_len
    if getattr(args, "alpha", None) is not None:
        model["cfg_alpha"] = args.alpha
    if getattr(args, "sample_steps", None) is not None:
        model["steps"] = args.sample_steps
    run = run.with_overrides(train=train, model=model, data=data)
    flags = getattr(args, "flags", None)
    if flags:
        from dataclasses import replace

        run = replace(run, ablation=Ablation.from_flags(flags))
    return run


def echo_config(run: RunConfig, out_dir: Path, command: str, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **run.to_dict(), **(extra or {})}
    text = json.dumps(payload, indent=2, sort_keys=True)
    (out_dir / "config.json").write_text(text)
    log.info("resolved config:\n%s", text)


def _tag(ablation: Ablation) -> str:
    return "+".join(ablation.active()) or "full"


# -- shared loaders ------------------------------------------------------------------

def _load_data(run_dir: Path, run: RunConfig) -> Data:
    clips, _ = load_corpus(run_dir / "corpus")
    vc, sc = load_codecs(run_dir / "codecs.ckpt")
    n = run.data.n_clips
    if len(clips) <= n:
        raise ConfigError(f"corpus has {len(clips)} clips; need more than n_clips={n} to hold out evaluation clips")
    train, held = clips[:n], clips[n:]
    return Data(train, held, vc, sc, encode_corpus(train, vc, sc), encode_corpus(held, vc, sc))


def _params(path: Path) -> dict[str, np.ndarray]:
    return load_training_checkpoint(path)[0]


def _student_ablation(student_dir: Path) -> Ablation:
    cfg = student_dir / "config.json"
    if cfg.exists():
        return Ablation(**json.loads(cfg.read_text()).get("ablation", {}))
    return Ablation()


# -- commands ------------------------------------------------------------------------

def cmd_gen_corpus(args, run: RunConfig) -> int:
    out = Path(args.run) / "corpus"
    echo_config(run, out, "gen-corpus")
    vs, ss = shapes(run.data, run.model)
    clips = make_synthetic_corpus(run.data.seed, run.data.n_clips + run.data.n_eval_clips, vs, ss)
    save_corpus(clips, out, run.data.seed, vs, ss)
    print(f"wrote {len(clips)} clips to {out}")
    return EXIT_OK


def cmd_train_codec(args, run: RunConfig) -> int:
    from .codec import SpeechCodec, VideoCodec, train_speech_codec, train_video_codec
    from .rng import Rng

    run_dir = Path(args.run)
    clips, _ = load_corpus(run_dir / "corpus")
    train = clips[: run.data.n_clips]
    vs, ss = shapes(run.data, run.model)
    vc = VideoCodec.init(vs, Rng(run.data.seed).child("video-codec-init"))
    vl = train_video_codec(vc, [c.video for c in train], steps=run.data.codec_steps, seed=run.data.seed)
    sc = SpeechCodec.init(ss, Rng(run.data.seed).child("speech-codec-init"))
    sl = train_speech_codec(sc, [c.features for c in train], steps=run.data.codec_steps, seed=run.data.seed)
    save_codecs(run_dir / "codecs.ckpt", vc, sc)
    echo_config(run, run_dir / "codec", "train-codec")
    held = clips[run.data.n_clips:]
    if held:
        err = [float(np.mean((vc.decode(vc.encode(c.video)) - c.video) ** 2)) for c in held]
        print(f"held-out video reconstruction MSE: mean {np.mean(err):.4f} max {np.max(err):.4f}")
    print(f"codec final losses: video {vl[-1]:.4f} speech {sl[-1]:.6f}")
    return EXIT_OK


def cmd_train_teacher(args, run: RunConfig) -> int:
    run_dir = Path(args.run)
    out = run_dir / "teacher"
    echo_config(run, out, "train-teacher")
    data = _load_data(run_dir, run)
    init, state = initial_params(run.model, run.train.seed), None
    if args.resume and (out / "teacher.ckpt").exists():
        init, state = load_training_checkpoint(out / "teacher.ckpt")
    res = train_teacher(data.train, run.model, run.train, init, out_dir=out, state=state, ablation=run.ablation)
    tail = [c.total for c in res.curve[-50:]] or [float("nan")]
    print(f"teacher trained to step {res.state.step}; mean loss over last {len(tail)} steps {np.mean(tail):.4f}")
    return EXIT_OK


def _distill(run_dir: Path, run: RunConfig, data: Data, ablation: Ablation, resume: bool = False) -> Path:
    out = run_dir / "students" / _tag(ablation)
    echo_config(run, out, "distill", {"ablation": asdict(ablation)})
    teacher = _params(run_dir / "teacher" / "teacher.ckpt")
    init, state = None, None
    if resume and (out / "student.ckpt").exists():
        init, state = load_training_checkpoint(out / "student.ckpt")
    res = train_student(data.train, run.model, run.train, teacher, ablation, out_dir=out, init=init, state=state)
    print(f"student '{_tag(ablation)}' trained to step {res.state.step}")
    return out


def cmd_distill(args, run: RunConfig) -> int:
    run_dir = Path(args.run)
    _distill(run_dir, run, _load_data(run_dir, run), run.ablation, args.resume)
    return EXIT_OK


def cmd_generate(args, run: RunConfig) -> int:
    run_dir = Path(args.run)
    data = _load_data(run_dir, run)
    if args.checkpoint:
        ckpt, ablation = Path(args.checkpoint), run.ablation
    else:
        sdir = run_dir / "students" / args.student
        ckpt, ablation = sdir / "student.ckpt", _student_ablation(sdir)
        if getattr(args, "flags", None):
            ablation = run.ablation
    if not 0 <= args.clip < len(data.eval_clips):
        raise ConfigError(f"--clip must be in 0..{len(data.eval_clips) - 1}")
    out = Path(args.out) if args.out else run_dir / "generate" / f"{args.student}_clip{args.clip}_seed{run.train.seed}"
    echo_config(run, out, "generate", {"ablation": asdict(ablation), "checkpoint": str(ckpt), "clip": args.clip})
    clip, lat = data.eval_clips[args.clip], data.eval[args.clip]
    g = generate(_params(ckpt), run.model, lat.ref, lat.audio, seed=run.train.seed, ablation=ablation,
                 codec=data.vcodec, clip=clip)
    formats.save_tensor(out / "latents.tnsr", g.latents)
    formats.save_video(out / "video.vidf", g.video)
    (out / "metrics.json").write_text(json.dumps(g.report.to_dict(), indent=2, sort_keys=True))
    digest = hashlib.sha256(g.latents.tobytes()).hexdigest()
    print(json.dumps({"latents_sha256": digest, **g.report.to_dict()}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench(args, run: RunConfig) -> int:
    run_dir = Path(args.run)
    out = run_dir / "bench"
    echo_config(run, out, "bench", {"chunks": args.chunks, "repeats": args.repeats})
    teacher = run_dir / "teacher" / "teacher.ckpt"
    params = _params(teacher) if teacher.exists() else initial_params(run.model, run.train.seed)
    b = bench_stream(params, run.model, n_chunks=args.chunks, repeats=args.repeats, teacher_chunks=(2, 4, 8),
                     seed=run.train.seed)
    b.write_csv(out / "bench.csv")
    summary = {"ttfc_ms": b.ttfc_ms, "teacher_ms": b.teacher_ms, "teacher_flops": b.teacher_flops,
               "wall_variation": b.wall_variation(1), "wall_spread": b.wall_spread(1)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"{'chunk':>5} {'wall_ms':>9} {'flops':>12} {'cache_bytes':>12} {'naive_bytes':>12}")
    for r in b.rows:
        print(f"{r['chunk']:>5} {r['wall_ms']:>9.2f} {r['flops']:>12} {r['cache_bytes']:>12} {r['naive_cache_bytes']:>12}")
    print(f"time to first chunk {b.ttfc_ms:.1f} ms; non-streaming: "
          + ", ".join(f"k={k}: {v:.1f} ms" for k, v in b.teacher_ms.items()))
    return EXIT_OK


def cmd_verify(args, run: RunConfig) -> int:
    from .verify import run_suite

    results = run_suite(quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_VALIDATION


def cmd_ablate(args, run: RunConfig) -> int:
    from .pipeline import evaluate_params

    run_dir = Path(args.run)
    data = _load_data(run_dir, run)
    variants = [Ablation()] + ([run.ablation] if run.ablation.active() else [])
    seeds = tuple(range(args.eval_seeds))
    results = {}
    for ab in variants:
        sdir = run_dir / "students" / _tag(ab)
        if not (sdir / "student.ckpt").exists() or args.retrain:
            sdir = _distill(run_dir, run, data, ab)
        ev = evaluate_params(_params(sdir / "student.ckpt"), data, run.model, ab, seeds=seeds)
        results[_tag(ab)] = ev.to_dict()
        print(f"{_tag(ab):<24} " + " ".join(f"{k}={v:.4f}" for k, v in ev.to_dict().items()))
    out = run_dir / "ablation"
    echo_config(run, out, "ablate", {"eval_seeds": list(seeds)})
    (out / "ablation.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    return EXIT_OK


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "train-codec": cmd_train_codec,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "generate": cmd_generate,
    "bench": cmd_bench,
    "verify": cmd_verify,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reststream", description="Streaming talking-head diffusion at desk scale.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (schema_version 1)")
    common.add_argument("--run", default="runs/default", help="run directory holding all artifacts")
    common.add_argument("--seed", type=int)
    common.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    add("gen-corpus", "write the synthetic talking-head corpus")
    add("train-codec", "fit the video and speech codecs")
    for name, help_ in (("train-teacher", "stage 1: non-streaming teacher"),
                        ("distill", "stage 2: streaming student distillation")):
        s = add(name, help_)
        s.add_argument("--steps", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
        s.add_argument("--flags", nargs="*", default=[], help="ablation flags")
    g = add("generate", "stream one held-out clip and report metrics")
    g.add_argument("--student", default="full", help="student tag under students/")
    g.add_argument("--checkpoint", help="explicit checkpoint path instead of --student")
    g.add_argument("--clip", type=int, default=0, help="held-out clip index")
    g.add_argument("--alpha", type=float)
    g.add_argument("--sample-steps", type=int)
    g.add_argument("--chunk-len", type=int)
    g.add_argument("--flags", nargs="*", default=[])
    g.add_argument("--out")
    b = add("bench", "per-chunk latency, FLOPs and cache memory")
    b.add_argument("--chunks", type=int, default=16)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--chunk-len", type=int)
    b.add_argument("--sample-steps", type=int)
    v = add("verify", "run the oracle suite")
    v.add_argument("--quick", action="store_true")
    a = add("ablate", "train and compare an ablated student against the full one")
    a.add_argument("--flags", nargs="*", default=[])
    a.add_argument("--steps", type=int)
    a.add_argument("--lr", type=float)
    a.add_argument("--eval-seeds", type=int, default=2)
    a.add_argument("--retrain", action="store_true")
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](args, cfg)
    except TrainingError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except (OSError, formats.FormatError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        log.error("validation error: %s", exc)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
