"""Oracle suite: each check recomputes a property independently and reports the
worst deviation. Used by ``reststream verify`` and by the acceptance tests."""

from __future__ import annotations

import hashlib
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import dit, formats
from .chunks import ChunkLayout, LatentSequence, async_timesteps, segment, stitch
from .config import ModelConfig, TrainConfig
from .flow import TimeSchedule, add_noise, euler_step, flow_target
from .gradcheck import gradcheck
from .infer import bench_stream, generate, sample_teacher
from .rng import Rng
from .tensor import Tensor, no_grad
from .train import Batch, FlowPair, contrastive_loss, smoothness_loss, student_losses, student_pass, teacher_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} value={self.value:.3g} threshold={self.threshold:.3g} ({self.seconds:.1f}s) {self.detail}"


def _timed(name: str, threshold: float, fn: Callable[[], tuple[float, str]], higher_is_better: bool = False) -> CheckResult:
    t0 = time.perf_counter()
    value, detail = fn()
    ok = value >= threshold if higher_is_better else value <= threshold
    return CheckResult(name, bool(ok), float(value), threshold, time.perf_counter() - t0, detail)


def tiny_model(seed: int = 0, **kw) -> ModelConfig:
    base = dict(h=2, w=2, dv=4, d=16, heads=2, blocks=2, chunk_len=3, d_t=8, audio_tokens=2, d_audio=4, steps=4)
    base.update(kw)
    return ModelConfig(**base)


def random_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Non-zero gates so every path (sink, context, audio) affects the output."""
    return dit.init_params(cfg, Rng(seed).child("params"), zero_gates=False)


# -- brute-force cached attention ----------------------------------------------------

def _complex_pairs(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return x[..., :half] + 1j * x[..., half:]


def brute_force_attention(q, k_cur, v_cur, sink_kv, prev_kv, f: int, T: int, base: float,
                          use_sink: bool = True) -> np.ndarray:
    """Attention over the materialised sequence [sink | previous chunk | current chunk].

    Rotary positions are applied as complex phases on the relative offset
    between query and key frames (context frames sit at -(f-1)..0, current
    frames at 0..f-1); sink scores are plain dot products. Everything is float64.
    Inputs are [heads, tokens, dh] arrays; ``prev_kv`` may be None.
    Returns [tokens, heads * dh].
    """
    q, k_cur, v_cur = (np.asarray(a, np.float64) for a in (q, k_cur, v_cur))
    H, N, dh = q.shape
    half = dh // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    q_pos = np.repeat(np.arange(f), T)
    keys, values, k_pos, rotated = [], [], [], []
    if use_sink:
        keys.append(np.asarray(sink_kv[0], np.float64))
        values.append(np.asarray(sink_kv[1], np.float64))
        k_pos.append(np.zeros(T))
        rotated.append(np.zeros(T, bool))
    if prev_kv is not None:
        keys.append(np.asarray(prev_kv[0], np.float64))
        values.append(np.asarray(prev_kv[1], np.float64))
        k_pos.append(np.repeat(np.arange(-(f - 1), 1), T))
        rotated.append(np.ones(f * T, bool))
    keys.append(k_cur)
    values.append(v_cur)
    k_pos.append(np.repeat(np.arange(f), T))
    rotated.append(np.ones(f * T, bool))
    K, V = np.concatenate(keys, axis=1), np.concatenate(values, axis=1)
    kp, rot = np.concatenate(k_pos), np.concatenate(rotated)
    qc, kc = _complex_pairs(q), _complex_pairs(K)
    out = np.zeros((N, H * dh))
    for h in range(H):
        plain = q[h] @ K[h].T
        rel = (q_pos[:, None] - kp[None, :])[..., None] * inv          # [N, M, half]
        phased = np.real(np.sum(qc[h][:, None, :] * np.conj(kc[h][None, :, :]) * np.exp(1j * rel), axis=-1))
        s = np.where(rot[None, :], phased, plain) / np.sqrt(dh)
        s = s - s.max(axis=1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=1, keepdims=True)
        out[:, h * dh:(h + 1) * dh] = w @ V[h]
    return out


def cache_equivalence(n_configs: int = 10, seed: int = 0) -> tuple[float, list[dict]]:
    """Stream random configurations and compare every cached attention call with the oracle."""
    rng = Rng(seed).child("cache-oracle")
    worst, runs = 0.0, []
    for i in range(n_configs):
        r = rng.child(i)
        blocks = int(r.child("b").gen.choice([1, 2, 4]))
        heads = int(r.child("h").gen.choice([1, 2, 4]))
        chunks = int(r.child("k").integers(2, 6))
        f = int(r.child("f").integers(2, 5))
        cfg = tiny_model(blocks=blocks, heads=heads, chunk_len=f, d=16, steps=2)
        P = dit.as_tensors(random_params(cfg, i))
        ref = r.child("ref").normal((cfg.h, cfg.w, 1, cfg.dv))
        with no_grad():
            sink = [(k.numpy().copy(), v.numpy().copy()) for k, v in dit.reference_pass(P, Tensor(ref), cfg)]
        calls: list[tuple] = []
        real = dit.cached_self_attention

        def spy(q, k_cur, v_cur, cache, j, step, cfg_, **kw):
            out = real(q, k_cur, v_cur, cache, j, step, cfg_, **kw)
            calls.append((j, step, q.numpy().copy(), k_cur.numpy().copy(), v_cur.numpy().copy(), out.numpy().copy()))
            return out

        dit.cached_self_attention = spy
        try:
            cache = dit.IDContextCache(cfg, cfg.steps)
            with no_grad():
                dit.prime_cache(P, ref, cache, cfg)
                for c in range(chunks):
                    for s in range(cfg.steps):
                        z = r.child("z", c, s).normal((cfg.h, cfg.w, f, cfg.dv))
                        a = r.child("a", c, s).normal((f, cfg.audio_tokens, cfg.d_audio))
                        dit.student_forward(P, Tensor(z), Tensor(a), np.full(f, 0.5, np.float32), cache, s, cfg)
        finally:
            dit.cached_self_attention = real
        prev: dict[tuple[int, int], tuple] = {}
        diff = 0.0
        for j, s, q, k, v, out in calls:
            want = brute_force_attention(q, k, v, sink[j], prev.get((j, s)), f, cfg.tokens_per_frame, cfg.rope_base)
            diff = max(diff, float(np.max(np.abs(out - want))))
            prev[(j, s)] = (k, v)
        runs.append({"blocks": blocks, "heads": heads, "chunks": chunks, "chunk_len": f, "max_abs_diff": diff})
        worst = max(worst, diff)
    return worst, runs


# -- streaming vs non-streaming ---------------------------------------------------

def stream_equivalence(steps: int = 8, seed: int = 0, alpha: float = 6.0) -> float:
    cfg = tiny_model(chunk_len=4, steps=steps, blocks=2, d=32, heads=2)
    params = random_params(cfg, seed)
    r = Rng(seed).child("equiv")
    ref = r.child("ref").normal((cfg.h, cfg.w, 1, cfg.dv))
    audio = r.child("audio").normal((cfg.chunk_len, cfg.audio_tokens, cfg.d_audio))
    g = generate(params, cfg, ref, audio, steps=steps, alpha=alpha, seed=seed)
    t = sample_teacher(params, cfg, ref, audio, steps=steps, alpha=alpha, seed=seed)
    return float(np.max(np.abs(g.latents - t)))


# -- gradients ----------------------------------------------------------------------

def _grad_batch(cfg: ModelConfig, seed: int, k: int = 2) -> Batch:
    r = Rng(seed).child("grad-batch")
    N = 1 + k * (cfg.chunk_len - 1)
    return Batch(
        ref=r.child("ref").normal((cfg.h, cfg.w, 1, cfg.dv)),
        z0=r.child("z0").normal((cfg.h, cfg.w, N, cfg.dv)),
        audio=r.child("audio").normal((N, cfg.audio_tokens, cfg.d_audio)),
        per_chunk_t=r.child("t").uniform(k, 0.2, 0.8),
        eps=r.child("eps").normal((cfg.h, cfg.w, N, cfg.dv)),
    )


def gradient_errors(seed: int = 0, eps: float = 1e-3, max_coords: int = 6) -> dict[str, float]:
    """Relative errors of autodiff vs central differences for every loss."""
    cfg = tiny_model(blocks=1, chunk_len=3)
    params = random_params(cfg, seed)
    teacher = random_params(cfg, seed + 1)
    batch = _grad_batch(cfg, seed)
    tcfg = TrainConfig()
    out = {}
    out["regression_teacher"] = gradcheck(lambda P: teacher_loss(P, batch, cfg), params, eps, max_coords, seed).rel_error
    out["regression_student"] = gradcheck(lambda P: student_pass(P, batch, cfg)[0], params, eps, max_coords, seed).rel_error
    TP = dit.as_tensors(teacher)
    out["total"] = gradcheck(lambda P: student_losses(P, TP, batch, cfg, tcfg)[0], params, eps, max_coords, seed).rel_error
    r = Rng(seed).child("flows")
    flows = {"s": r.child("s").normal((2, 2, 5, 3)), "t": r.child("t").normal((2, 2, 5, 3))}
    for variant in ("printed", "infonce"):
        out[f"contrastive_{variant}"] = gradcheck(
            lambda p, v=variant: contrastive_loss(FlowPair(p["t"], p["s"]), TrainConfig().tau, v), flows, eps, 64, seed).rel_error
    for variant in ("divergence", "literal"):
        out[f"smoothness_{variant}"] = gradcheck(
            lambda p, v=variant: smoothness_loss(FlowPair(p["t"], p["s"]), v), flows, eps, 64, seed).rel_error
    return out


MODEL_LOSSES = ("regression_teacher", "regression_student", "total")


def gradient_check(seed: int = 0) -> tuple[bool, dict[str, float]]:
    errs = gradient_errors(seed)
    ok = all(v <= (1e-2 if k in MODEL_LOSSES else 1e-3) for k, v in errs.items())
    return ok, errs


# -- flow path, scheduler -------------------------------------------------------------

def flow_path_errors(seed: int = 0) -> dict[str, float]:
    r = Rng(seed).child("flow")
    z0, eps = r.child("z0").normal((4, 4, 5, 8)), r.child("eps").normal((4, 4, 5, 8))
    out = {
        "t0": float(np.max(np.abs(add_noise(z0, eps, 0.0).numpy() - z0))),
        "t1": float(np.max(np.abs(add_noise(z0, eps, 1.0).numpy() - eps))),
    }
    target = flow_target(z0, eps)
    for n in (2, 4, 8):
        z = Tensor(eps)
        for a, b in TimeSchedule.uniform(n).pairs():
            z = euler_step(z, target, a, b)
        out[f"euler_{n}"] = float(np.max(np.abs(z.numpy() - z0)))
    return out


def scheduler_laws(n_layouts: int = 200, seed: int = 0) -> tuple[int, int]:
    """(number of violations, layouts checked) for round-trips and the timestep vector."""
    r = Rng(seed).child("sched")
    bad = 0
    for i in range(n_layouts):
        ri = r.child(i)
        k, f = int(ri.integers(1, 9)), int(ri.integers(2, 8))
        L = ChunkLayout.for_chunks(k, f)
        z = LatentSequence(ri.child("ref").normal((2, 2, 1, 3)), ri.child("z").normal((2, 2, L.f_total, 3)))
        if not np.array_equal(stitch(segment(z, f)).frames, z.frames):
            bad += 1
            continue
        ts = ri.child("t").uniform(k)
        tv = async_timesteps(k, f, ts)
        if tv.values[0] != 0 or tv.values.size != 1 + L.f_total:
            bad += 1
            continue
        if any(np.any(tv.frames[L.owned_slice(j)] != ts[j - 1]) for j in range(1, k + 1)):
            bad += 1
    return bad, n_layouts


# -- causality -----------------------------------------------------------------------

def causality(seed: int = 0, n_chunks: int = 4) -> list[tuple[int, bool]]:
    cfg = tiny_model(chunk_len=4, steps=4, blocks=2, d=32)
    params = random_params(cfg, seed)
    L = ChunkLayout.for_chunks(n_chunks, cfg.chunk_len)
    r = Rng(seed).child("causal")
    ref = r.child("ref").normal((cfg.h, cfg.w, 1, cfg.dv))
    audio = r.child("audio").normal((L.f_total, cfg.audio_tokens, cfg.d_audio))
    base = generate(params, cfg, ref, audio, seed=seed).chunks
    out = []
    for i in (1, 2, 3):
        cut = audio.copy()
        for j in range(i + 1, n_chunks + 1):
            cut[L.owned_slice(j)] = 0.0
        other = generate(params, cfg, ref, cut, seed=seed).chunks
        out.append((i, all(np.array_equal(base[j], other[j]) for j in range(i))))
    return out


# -- scaling ------------------------------------------------------------------------

@dataclass
class ScalingReport:
    flops_constant: bool
    flops_match_formula: bool
    bytes_constant: bool
    wall_variation: float
    wall_spread: float
    ttfc_ms: float
    teacher_ms: dict
    teacher_flops_match: bool


def scaling(n_chunks: int = 16, repeats: int = 5, seed: int = 0, cfg: ModelConfig | None = None) -> ScalingReport:
    from .tensor import FlopCounter, counting

    cfg = cfg or ModelConfig(steps=4)
    params = random_params(cfg, seed)
    b = bench_stream(params, cfg, n_chunks=n_chunks, repeats=repeats, teacher_chunks=(2, 4), seed=seed)
    flops = [row["flops"] for row in b.rows]
    mem = [row["cache_bytes"] for row in b.rows]
    # teacher cost model vs the instrumented counter
    r = Rng(seed).child("tf")
    fl_ok = True
    for k, expect in b.teacher_flops.items():
        N = 1 + k * (cfg.chunk_len - 1)
        c = FlopCounter()
        with counting(c):
            sample_teacher(params, cfg, r.child("ref").normal((cfg.h, cfg.w, 1, cfg.dv)),
                           r.child("a").normal((N, cfg.audio_tokens, cfg.d_audio)), seed=seed)
        fl_ok &= c.flops == expect
    return ScalingReport(
        flops_constant=len(set(flops)) == 1,
        flops_match_formula=all(row["flops"] == row["flops_analytic"] for row in b.rows),
        bytes_constant=len(set(mem)) == 1,
        wall_variation=b.wall_variation(skip=1),
        wall_spread=b.wall_spread(skip=1),
        ttfc_ms=b.ttfc_ms,
        teacher_ms=b.teacher_ms,
        teacher_flops_match=bool(fl_ok),
    )


# -- determinism and formats -------------------------------------------------------------

def determinism_and_formats(seed: int = 0) -> dict[str, bool]:
    from .pipeline import initial_params
    from .train import LatentClip, load_training_checkpoint, save_training_checkpoint, train_teacher

    cfg = tiny_model(chunk_len=3)
    r = Rng(seed).child("det")
    N = 1 + 2 * (cfg.chunk_len - 1)
    clip = LatentClip("c", r.child("ref").normal((cfg.h, cfg.w, 1, cfg.dv)),
                      r.child("z").normal((cfg.h, cfg.w, N, cfg.dv)),
                      r.child("a").normal((N, cfg.audio_tokens, cfg.d_audio)))
    tcfg = TrainConfig(lr=1e-3, steps=3, seed=seed, log_every=0)
    out = {}
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        runs = []
        for name in ("a", "b"):
            res = train_teacher([clip], cfg, tcfg, initial_params(cfg, seed), out_dir=tmp / name)
            runs.append(res)
        out["train_bytes_identical"] = (tmp / "a" / "teacher.ckpt").read_bytes() == (tmp / "b" / "teacher.ckpt").read_bytes()
        out["curve_identical"] = (tmp / "a" / "teacher_loss.csv").read_bytes() == (tmp / "b" / "teacher_loss.csv").read_bytes()
        g1 = generate(runs[0].params, cfg, clip.ref, clip.audio, seed=7).latents
        g2 = generate(runs[1].params, cfg, clip.ref, clip.audio, seed=7).latents
        out["generate_identical"] = hashlib.sha256(g1.tobytes()).digest() == hashlib.sha256(g2.tobytes()).digest()
        arr = r.child("arr").normal((3, 1, 4, 2))
        formats.save_tensor(tmp / "x.tnsr", arr)
        out["tensor_roundtrip"] = formats.load_tensor(tmp / "x.tnsr").tobytes() == arr.tobytes()
        save_training_checkpoint(tmp / "c.ckpt", runs[0].params, runs[0].state)
        p, st = load_training_checkpoint(tmp / "c.ckpt")
        out["checkpoint_roundtrip"] = (
            all(p[k].tobytes() == v.tobytes() for k, v in runs[0].params.items())
            and all(st.m[k].tobytes() == v.tobytes() for k, v in runs[0].state.m.items())
            and st.step == runs[0].state.step
        )
    return out


# -- suite -----------------------------------------------------------------------------

def run_suite(quick: bool = False) -> list[CheckResult]:
    res = []

    def cache():
        worst, runs = cache_equivalence(4 if quick else 10)
        return worst, f"{len(runs)} configs"

    def equiv():
        return stream_equivalence(), "k=1, 8 steps"

    def grads():
        ok, errs = gradient_check()
        worst = max(errs[k] / (1e-2 if k in MODEL_LOSSES else 1e-3) for k in errs)
        return worst, " ".join(f"{k}={v:.1e}" for k, v in errs.items())

    def flow():
        e = flow_path_errors()
        return max(e.values()), ""

    def sched():
        bad, n = scheduler_laws(50 if quick else 200)
        return bad, f"{n} layouts"

    def causal():
        c = causality()
        return sum(not ok for _, ok in c), str(c)

    def det():
        d = determinism_and_formats()
        return sum(not v for v in d.values()), ""

    res.append(_timed("cache_equivalence", 1e-5, cache))
    res.append(_timed("stream_equivalence", 1e-4, equiv))
    res.append(_timed("gradients (err/tol)", 1.0, grads))
    res.append(_timed("flow_path", 1e-5, flow))
    res.append(_timed("scheduler_laws", 0, sched))
    res.append(_timed("causality", 0, causal))
    res.append(_timed("determinism_formats", 0, det))
    if not quick:
        def scale():
            r = scaling()
            exact = r.flops_constant and r.flops_match_formula and r.bytes_constant and r.teacher_flops_match
            faster = all(r.ttfc_ms < ms for ms in r.teacher_ms.values())
            value = r.wall_variation if exact and faster else float("inf")
            return value, f"ttfc={r.ttfc_ms:.0f}ms teacher={ {k: round(v) for k, v in r.teacher_ms.items()} }"

        res.append(_timed("scaling (wall variation)", 0.2, scale))
    return res


__all__ = [
    "CheckResult",
    "brute_force_attention",
    "cache_equivalence",
    "causality",
    "determinism_and_formats",
    "flow_path_errors",
    "gradient_check",
    "gradient_errors",
    "run_suite",
    "scaling",
    "scheduler_laws",
    "stream_equivalence",
    "tiny_model",
]
