from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reststream import dit
from reststream.dit import (
    CacheError,
    IDContextCache,
    UsageError,
    as_tensors,
    audio_cross_attention,
    block_params,
    cached_self_attention,
    dit_forward,
    init_params,
    naive_history_bytes,
    prime_cache,
    qkv,
    student_chunk_flops,
    teacher_flops,
)
from reststream.rng import Rng
from reststream.tensor import FlopCounter, Tensor, counting, no_grad
from reststream.verify import brute_force_attention, cache_equivalence, random_params, tiny_model


def _chunk_inputs(cfg, seed, n=None):
    r = Rng(seed).child("inputs")
    n = n or cfg.chunk_len
    return (
        r.child("ref").normal((cfg.h, cfg.w, 1, cfg.dv)),
        r.child("z").normal((cfg.h, cfg.w, n, cfg.dv)),
        r.child("a").normal((n, cfg.audio_tokens, cfg.d_audio)),
        r.child("t").uniform(n, 0.0, 1.0).astype(np.float32),
    )


# -- projections -------------------------------------------------------------------


def test_qkv_identity_weights_and_zero_input():
    d, heads = 8, 2
    eye = Tensor(np.eye(d, dtype=np.float32))
    bp = {"sa.wq": eye, "sa.wk": eye, "sa.wv": eye}
    H = Rng(0).normal((5, d))
    q, k, v = qkv(Tensor(H), bp, heads)
    np.testing.assert_array_equal(q.numpy(), H.reshape(5, heads, d // heads).transpose(1, 0, 2))
    zq, zk, zv = qkv(Tensor(np.zeros((5, d), np.float32)), bp, heads)
    assert not zq.numpy().any() and not zk.numpy().any() and not zv.numpy().any()
    with pytest.raises(UsageError):
        qkv(Tensor(np.zeros((5, d + 1), np.float32)), bp, heads)


# -- cached attention ----------------------------------------------------------------


def _rope_abs(x, pos, base):
    # half-split rotary embedding written out with real arithmetic
    half = x.shape[-1] // 2
    ang = pos[:, None] * base ** (-np.arange(half) / half)
    a, b = x[..., :half], x[..., half:]
    c, s = np.cos(ang), np.sin(ang)
    return np.concatenate([a * c - b * s, a * s + b * c], axis=-1)


def test_first_chunk_without_sink_is_plain_self_attention():
    cfg = tiny_model(heads=2, d=16, chunk_len=3)
    f, T, dh = cfg.chunk_len, cfg.tokens_per_frame, cfg.head_dim
    r = Rng(1)
    q, k, v = (r.child(n).normal((cfg.heads, f * T, dh)) for n in "qkv")
    cache = IDContextCache(cfg, 2)
    out = cached_self_attention(Tensor(q), Tensor(k), Tensor(v), cache, 0, 0, cfg, use_sink=False).numpy()
    pos = np.repeat(np.arange(f), T).astype(np.float64)
    want = []
    for h in range(cfg.heads):
        s = _rope_abs(q[h].astype(np.float64), pos, cfg.rope_base) @ _rope_abs(k[h].astype(np.float64), pos, cfg.rope_base).T
        w = np.exp(s / np.sqrt(dh) - (s / np.sqrt(dh)).max(axis=1, keepdims=True))
        want.append((w / w.sum(axis=1, keepdims=True)) @ v[h])
    np.testing.assert_allclose(out, np.concatenate(want, axis=1), atol=1e-5)
    # the slot is overwritten after use
    assert np.array_equal(cache.ctx_k[0][0].numpy(), k)
    assert cache.ctx_valid[0][0] and not cache.ctx_valid[0][1]


def test_second_chunk_matches_materialised_sequence():
    cfg = tiny_model(heads=2, d=16, chunk_len=3)
    f, T, dh = cfg.chunk_len, cfg.tokens_per_frame, cfg.head_dim
    r = Rng(2)
    sink = [(Tensor(r.child("sk", j).normal((cfg.heads, T, dh))), Tensor(r.child("sv", j).normal((cfg.heads, T, dh))))
            for j in range(cfg.blocks)]
    cache = IDContextCache(cfg, 1)
    cache.write_sink(sink)
    prev = [r.child(n, 1).normal((cfg.heads, f * T, dh)) for n in "qkv"]
    cur = [r.child(n, 2).normal((cfg.heads, f * T, dh)) for n in "qkv"]
    cached_self_attention(*(Tensor(a) for a in prev), cache, 1, 0, cfg)
    out = cached_self_attention(*(Tensor(a) for a in cur), cache, 1, 0, cfg).numpy()
    want = brute_force_attention(*cur, (sink[1][0].numpy(), sink[1][1].numpy()), (prev[1], prev[2]), f, T,
                                 cfg.rope_base)
    np.testing.assert_allclose(out, want, atol=1e-5)


def test_cache_equivalence_oracle_small():
    worst, runs = cache_equivalence(n_configs=3, seed=5)
    assert len(runs) == 3
    assert worst <= 1e-5


def test_cache_errors():
    cfg = tiny_model()
    cache = IDContextCache(cfg, 2)
    T, dh, f = cfg.tokens_per_frame, cfg.head_dim, cfg.chunk_len
    kv = Tensor(np.zeros((cfg.heads, f * T, dh), np.float32))
    with pytest.raises(CacheError, match="before it was written"):
        cached_self_attention(kv, kv, kv, cache, 0, 0, cfg)
    with pytest.raises(CacheError, match="outside"):
        cached_self_attention(kv, kv, kv, cache, 0, 2, cfg, use_sink=False)
    bad = Tensor(np.zeros((cfg.heads, (f - 1) * T, dh), np.float32))
    with pytest.raises(CacheError, match="does not fit"):
        cached_self_attention(bad, bad, bad, cache, 0, 0, cfg, use_sink=False)
    with pytest.raises(CacheError):
        cache.write_sink([(kv, kv)] * cfg.blocks)  # wrong token count
    s = Tensor(np.zeros((cfg.heads, T, dh), np.float32))
    cache.write_sink([(s, s)] * cfg.blocks)
    with pytest.raises(CacheError, match="once"):
        cache.write_sink([(s, s)] * cfg.blocks)


def test_sink_immutable_and_memory_constant_over_chunks():
    cfg = tiny_model()
    P = as_tensors(random_params(cfg, 0))
    ref, _, _, _ = _chunk_inputs(cfg, 0)
    cache = IDContextCache(cfg, cfg.steps)
    with no_grad():
        prime_cache(P, ref, cache, cfg)
        digest, nbytes = cache.sink_digest(), cache.nbytes()
        for c in range(5):
            _, z, a, t = _chunk_inputs(cfg, 10 + c)
            for s in range(cfg.steps):
                dit.student_forward(P, Tensor(z), Tensor(a), t, cache, s, cfg)
            assert cache.sink_digest() == digest
            assert cache.nbytes() == nbytes
    growth = [naive_history_bytes(cfg, cfg.steps, i) for i in range(1, 6)]
    assert np.all(np.diff(growth) == np.diff(growth)[0]) and growth[0] == nbytes


# -- audio cross-attention -------------------------------------------------------------


def test_zero_output_projection_gives_zero_delta():
    cfg = tiny_model()
    bp = block_params(as_tensors(random_params(cfg, 0)), 0)
    bp["ca.wo"] = Tensor(np.zeros_like(bp["ca.wo"].numpy()))
    x = Tensor(Rng(0).normal((3, cfg.tokens_per_frame, cfg.d)))
    a = Tensor(np.zeros((3, cfg.audio_tokens, cfg.d_audio), np.float32))
    assert not audio_cross_attention(x, a, bp, cfg.heads).numpy().any()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), a=st.integers(0, 3), b=st.integers(0, 3))
def test_audio_permutation_moves_only_those_frames(seed, a, b):
    cfg = tiny_model()
    bp = block_params(as_tensors(random_params(cfg, seed % 7)), 0)
    x = Rng(seed).child("x").normal((4, cfg.tokens_per_frame, cfg.d))
    au = Rng(seed).child("a").normal((4, cfg.audio_tokens, cfg.d_audio))
    perm = np.arange(4)
    perm[[a, b]] = perm[[b, a]]
    base = audio_cross_attention(Tensor(x), Tensor(au), bp, cfg.heads).numpy()
    moved = audio_cross_attention(Tensor(x[perm]), Tensor(au[perm]), bp, cfg.heads).numpy()
    np.testing.assert_allclose(moved, base[perm], atol=1e-6)
    # swapping audio alone changes only frames a and b
    only = audio_cross_attention(Tensor(x), Tensor(au[perm]), bp, cfg.heads).numpy()
    keep = [i for i in range(4) if i not in (a, b)]
    np.testing.assert_array_equal(only[keep], base[keep])


def test_audio_misaligned_raises():
    cfg = tiny_model()
    bp = block_params(as_tensors(random_params(cfg, 0)), 0)
    with pytest.raises(UsageError):
        audio_cross_attention(Tensor(np.zeros((3, cfg.tokens_per_frame, cfg.d), np.float32)),
                              Tensor(np.zeros((2, cfg.audio_tokens, cfg.d_audio), np.float32)), bp, cfg.heads)


def test_audio_path_can_learn_from_zero_gate_init():
    # with adaLN-Zero gates the audio branch must still receive gradient once the
    # output head is non-zero; a zero ca.wo would pin both at zero forever
    cfg = tiny_model()
    p = init_params(cfg, Rng(0))
    assert np.any(p["blk0.ca.wo"] != 0)
    p["out.w"] = Rng(1).normal(p["out.w"].shape)
    p["out.mod.w"] = Rng(2).normal(p["out.mod.w"].shape, 0.1)
    P = as_tensors(p, requires_grad=True)
    ref, z, a, t = _chunk_inputs(cfg, 3)
    zz = np.concatenate([ref, z], axis=2)
    v = dit_forward(P, Tensor(zz), Tensor(a), np.concatenate([[0], t]), cfg, mode="teacher")
    from reststream.tensor import mse

    mse(v, Tensor(np.zeros(v.shape, np.float32))).backward()
    d = cfg.d
    gate_cols = slice(5 * d, 6 * d)  # shift/scale/gate for sa, then ca
    assert np.abs(P["blk0.mod.w"].grad).sum() > 0
    assert np.abs(P["blk0.mod.w"].grad[:, gate_cols]).sum() > 0


# -- forward modes ----------------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_student_single_chunk_equals_teacher(seed):
    cfg = tiny_model(chunk_len=4, blocks=2)
    P = as_tensors(random_params(cfg, seed))
    ref, z, a, t = _chunk_inputs(cfg, seed)
    zz = Tensor(np.concatenate([ref, z], axis=2))
    tv = np.concatenate([[0.0], t]).astype(np.float32)
    with no_grad():
        vt = dit_forward(P, zz, Tensor(a), tv, cfg, mode="teacher").numpy()
        vs = dit_forward(P, zz, Tensor(a), tv, cfg, mode="student", cache=IDContextCache(cfg, 1)).numpy()
    assert vs.shape == z.shape
    assert np.max(np.abs(vt - vs)) <= 1e-5


def test_mode_cache_mismatch_and_bad_t_vector():
    cfg = tiny_model()
    P = as_tensors(random_params(cfg, 0))
    ref, z, a, t = _chunk_inputs(cfg, 0)
    zz = Tensor(np.concatenate([ref, z], axis=2))
    tv = np.concatenate([[0.0], t])
    with pytest.raises(UsageError):
        dit_forward(P, zz, Tensor(a), tv, cfg, mode="teacher", cache=IDContextCache(cfg, 1))
    with pytest.raises(UsageError):
        dit_forward(P, zz, Tensor(a), tv, cfg, mode="student")
    with pytest.raises(UsageError):
        dit_forward(P, zz, Tensor(a), np.concatenate([[0.3], t]), cfg, mode="teacher")
    with pytest.raises(UsageError):
        dit_forward(P, zz, Tensor(a), tv, cfg, mode="sideways")


def test_zero_gate_init_is_identity_velocity_zero():
    cfg = tiny_model()
    P = as_tensors(init_params(cfg, Rng(0)))
    ref, z, a, t = _chunk_inputs(cfg, 0)
    v = dit_forward(P, Tensor(np.concatenate([ref, z], axis=2)), Tensor(a), np.concatenate([[0], t]), cfg,
                    mode="teacher")
    assert not v.numpy().any()


# -- cost model ---------------------------------------------------------------------------


def test_student_flops_formula_matches_counter_and_is_constant():
    cfg = tiny_model()
    P = as_tensors(random_params(cfg, 0))
    ref, _, _, _ = _chunk_inputs(cfg, 0)
    cache = IDContextCache(cfg, 1)
    with no_grad():
        prime_cache(P, ref, cache, cfg)
        counts = []
        for c in range(4):
            _, z, a, t = _chunk_inputs(cfg, c)
            fc = FlopCounter()
            with counting(fc):
                dit.student_forward(P, Tensor(z), Tensor(a), t, cache, 0, cfg)
            counts.append(fc.flops)
    assert counts == [student_chunk_flops(cfg)] * 4


@pytest.mark.parametrize("n", [3, 5, 9])
def test_teacher_flops_formula_matches_counter(n):
    cfg = tiny_model()
    P = as_tensors(random_params(cfg, 0))
    ref, z, a, t = _chunk_inputs(cfg, 0, n)
    fc = FlopCounter()
    with no_grad(), counting(fc):
        dit.teacher_forward(P, Tensor(ref), Tensor(z), Tensor(a), t, cfg)
    assert fc.flops == teacher_flops(cfg, n)


def test_teacher_flops_grow_quadratically():
    cfg = tiny_model()
    fl = np.array([teacher_flops(cfg, n) for n in range(1, 40, 3)], dtype=np.float64)
    d2 = np.diff(fl, 2)
    assert np.all(d2 > 0)
    np.testing.assert_allclose(d2, d2[0])
