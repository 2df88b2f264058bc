from __future__ import annotations

import csv

import numpy as np
import pytest

from reststream.chunks import ChunkLayout
from reststream.codec import make_synthetic_corpus
from reststream.config import Ablation, DataConfig, ModelConfig
from reststream.dit import naive_history_bytes, student_chunk_flops
from reststream.infer import (
    BENCH_FIELDS,
    StreamError,
    StreamSession,
    aperture_estimate,
    bench_stream,
    boundary_discontinuity,
    boundary_positions,
    evaluate,
    frame_noise,
    generate,
    identity_statistics,
    joint_cfg,
    pearson,
)
from reststream.pipeline import shapes
from reststream.rng import Rng
from reststream.tensor import Tensor
from reststream.verify import causality, random_params, stream_equivalence, tiny_model


def setup(seed=0, k=3, **kw):
    cfg = tiny_model(**kw)
    r = Rng(seed).child("setup")
    N = 1 + k * (cfg.chunk_len - 1)
    return (cfg, random_params(cfg, seed), r.child("ref").normal((cfg.h, cfg.w, 1, cfg.dv)),
            r.child("audio").normal((N, cfg.audio_tokens, cfg.d_audio)))


# -- joint CFG ---------------------------------------------------------------------


def test_joint_cfg_reductions():
    vc, vu = Rng(0).normal((2, 3)), Rng(1).normal((2, 3))
    np.testing.assert_array_equal(joint_cfg(vc, vu, 1.0), vc)
    np.testing.assert_array_equal(joint_cfg(vc, vu, 0.0), vu)
    np.testing.assert_array_equal(joint_cfg(np.ones(4, np.float32), np.zeros(4, np.float32), 6.0), np.full(4, 6.0))
    t = joint_cfg(Tensor(vc), Tensor(vu), 6.0).numpy()
    np.testing.assert_allclose(t, vu + 6 * (vc - vu), rtol=1e-6)
    with pytest.raises(StreamError):
        joint_cfg(vc, vu[:1], 2.0)


def test_defaults_follow_sampling_setup():
    assert ModelConfig().steps == 8 and ModelConfig().cfg_alpha == 6.0


def test_unconditional_branch_ignores_reference_and_audio():
    cfg, p, ref, audio = setup()
    a = generate(p, cfg, ref, audio, alpha=0.0).latents
    b = generate(p, cfg, ref + 3.0, np.zeros_like(audio), alpha=0.0).latents
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate(p, cfg, ref + 3.0, audio, alpha=1.0).latents)


# -- streaming ---------------------------------------------------------------------


def test_single_chunk_stream_matches_teacher_sampling():
    assert stream_equivalence(steps=8) <= 1e-4


def test_causality():
    assert all(ok for _, ok in causality())


def test_same_seed_bit_identical_and_seed_matters():
    cfg, p, ref, audio = setup()
    a = generate(p, cfg, ref, audio, seed=7).latents
    assert a.tobytes() == generate(p, cfg, ref, audio, seed=7).latents.tobytes()
    assert a.tobytes() != generate(p, cfg, ref, audio, seed=8).latents.tobytes()


def test_chunks_share_boundary_frames_and_stitch():
    cfg, p, ref, audio = setup(k=3)
    g = generate(p, cfg, ref, audio)
    L = ChunkLayout(audio.shape[0], cfg.chunk_len)
    assert g.latents.shape == (cfg.h, cfg.w, L.f_total, cfg.dv)
    for j, c in enumerate(g.chunks, start=1):
        np.testing.assert_array_equal(g.latents[:, :, L.owned_slice(j)], c[:, :, 0 if j == 1 else 1:])


def test_shared_frame_noise_is_per_frame():
    cfg = tiny_model()
    np.testing.assert_array_equal(frame_noise(3, 5, cfg), frame_noise(3, 5, cfg))
    assert not np.array_equal(frame_noise(3, 5, cfg), frame_noise(3, 6, cfg))


def test_session_errors():
    cfg, p, ref, audio = setup()
    with pytest.raises(StreamError):
        StreamSession(p, cfg, ref[:, :, :, :2])
    s = StreamSession(p, cfg, ref)
    with pytest.raises(StreamError):
        s.latents()
    with pytest.raises(StreamError):
        s.next_chunk(audio[: cfg.chunk_len - 1])


def test_ablations_change_generation():
    cfg, p, ref, audio = setup(k=3)
    full = generate(p, cfg, ref, audio).latents
    for flag in ("no_id_sink", "no_context_cache"):
        other = generate(p, cfg, ref, audio, ablation=Ablation.from_flags([flag])).latents
        assert not np.array_equal(full, other)
    # first chunk has no history, so dropping the context cache leaves it unchanged
    nc = generate(p, cfg, ref, audio, ablation=Ablation(no_context_cache=True))
    np.testing.assert_array_equal(nc.chunks[0], generate(p, cfg, ref, audio).chunks[0])


def test_cache_memory_constant_while_history_would_grow():
    cfg, p, ref, audio = setup(k=5)
    rep = generate(p, cfg, ref, audio).report
    assert len(set(rep.cache_bytes)) == 1
    naive = [naive_history_bytes(cfg, cfg.steps, i) for i in range(1, 6)]
    assert naive[-1] > naive[0]


# -- metrics ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def clip():
    vs, ss = shapes(DataConfig(), ModelConfig())
    return make_synthetic_corpus(0, 1, vs, ss)[0]


def test_ground_truth_scores_perfectly(clip):
    L = ChunkLayout(3 * (ModelConfig().chunk_len - 1) + 1, ModelConfig().chunk_len)
    lat = np.zeros((4, 4, L.f_total, 8), np.float32)
    rep = evaluate(clip.video, clip, L, latents=lat)
    assert rep.identity_drift == pytest.approx([1.0] * L.k, abs=1e-12)
    assert rep.sync_proxy == pytest.approx(1.0, abs=1e-9)


def test_aperture_estimate_tracks_envelope_exactly(clip):
    ap = aperture_estimate(clip.video, clip.reference, clip.head_color, clip.mouth_color)
    # the mouth's pixel area is width * aperture, so the estimate is affine in the aperture
    A = np.stack([clip.aperture.astype(np.float64), np.ones_like(clip.aperture, np.float64)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ap, rcond=None)
    np.testing.assert_allclose(A @ coef, ap, atol=1e-6)
    assert pearson(ap, clip.envelope) == pytest.approx(1.0, abs=1e-9)


def test_identity_statistics_detects_colour_swap(clip):
    frame = clip.video[:, :, 0]
    s = identity_statistics(frame)
    np.testing.assert_allclose(s[:3], clip.identity["bg"], atol=1e-6)
    np.testing.assert_allclose(s[3:], clip.identity["head"], atol=1e-6)
    swapped = frame[..., ::-1]
    assert not np.allclose(identity_statistics(swapped), s)


def test_boundary_positions():
    L = ChunkLayout(10, 4)  # shared frames 4 and 7 (1-based)
    assert boundary_positions(L) == [3, 4, 6, 7]


def test_hard_cut_vs_constant_video():
    L = ChunkLayout(10, 4)
    const = np.ones((2, 2, 10, 3), np.float32)
    assert boundary_discontinuity(const, L) == (0.0, 0.0)
    ramp = np.arange(10, dtype=np.float32)[None, None, :, None] * np.ones((2, 2, 1, 3), np.float32)
    cut = ramp.copy()
    cut[:, :, 4:] += 10.0  # jump right after the first shared frame
    b, i = boundary_discontinuity(cut, L)
    assert i == 0.0 and b > 10.0


# -- bench ----------------------------------------------------------------------------------


def test_bench_invariants(tmp_path):
    cfg, p, _, _ = setup(steps=2)
    b = bench_stream(p, cfg, n_chunks=5, repeats=1, teacher_chunks=(2, 3))
    assert [r["chunk"] for r in b.rows] == [1, 2, 3, 4, 5]
    assert {r["flops"] for r in b.rows} == {r["flops_analytic"] for r in b.rows}
    # conditional + unconditional branch at every denoising step
    assert all(r["flops"] == 2 * cfg.steps * student_chunk_flops(cfg) for r in b.rows)
    assert len({r["cache_bytes"] for r in b.rows}) == 1
    naive = [r["naive_cache_bytes"] for r in b.rows]
    assert naive == sorted(naive) and naive[-1] > naive[0]
    assert b.teacher_flops[3] > b.teacher_flops[2]
    b.write_csv(tmp_path / "b.csv")
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert list(rows[0]) == BENCH_FIELDS and len(rows) == 5
