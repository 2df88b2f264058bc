from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reststream.codec import (
    FULL_SCALE_VIDEO,
    AlignmentError,
    CodecShapeError,
    SpeechCodec,
    SpeechShape,
    VideoCodec,
    VideoShape,
    load_corpus,
    make_synthetic_corpus,
    patchify,
    save_corpus,
    speech_feature_extract,
    unpatchify,
)
from reststream.config import DataConfig, ModelConfig
from reststream.pipeline import build_data, load_codecs, save_codecs, shapes
from reststream.rng import Rng


@pytest.fixture(scope="module")
def trained():
    return build_data(DataConfig(n_clips=16, n_eval_clips=4), ModelConfig())


# -- shapes ----------------------------------------------------------------------


def test_full_scale_shape_arithmetic():
    assert (FULL_SCALE_VIDEO.h, FULL_SCALE_VIDEO.w, FULL_SCALE_VIDEO.f) == (16, 16, 16)


def test_desk_shape_arithmetic():
    s = VideoShape(32, 32, 9)
    assert (s.h, s.w, s.f) == (4, 4, 3)


def test_indivisible_shape_names_requirement():
    with pytest.raises(CodecShapeError, match="divisible by rH=8"):
        VideoShape(30, 32, 9)
    with pytest.raises(CodecShapeError, match="rF=4"):
        VideoShape(32, 32, 10)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 3), w=st.integers(1, 3), f=st.integers(1, 4), rH=st.integers(1, 4),
       rF=st.integers(1, 4), D=st.integers(1, 3), seed=st.integers(0, 50))
def test_patchify_roundtrip_and_shape_laws(h, w, f, rH, rF, D, seed):
    s = VideoShape(h * rH, w * rH, 1 + (f - 1) * rF, rH, rH, rF, D)
    X = Rng(seed).normal((s.H, s.W, s.F, D))
    P = patchify(X, rH, rH, rF)
    assert P.shape == (s.h, s.w, s.f, s.patch_dim)
    assert np.array_equal(unpatchify(P, rH, rH, rF, D), X)


def test_first_latent_frame_sees_only_first_pixel_frame():
    s = VideoShape(8, 8, 5)
    X = Rng(0).normal((8, 8, 5, 3))
    Y = X.copy()
    Y[:, :, 1:] += 1.0
    vc = VideoCodec.init(s, Rng(1))
    np.testing.assert_array_equal(vc.encode(X)[:, :, 0], vc.encode(Y)[:, :, 0])


def test_codec_shape_roundtrip_and_errors():
    s = VideoShape(16, 16, 9)
    vc = VideoCodec.init(s, Rng(0))
    X = Rng(1).normal((16, 16, 9, 3))
    assert vc.decode(vc.encode(X)).shape == X.shape
    with pytest.raises(CodecShapeError):
        vc.encode(X[:, :, :8])
    with pytest.raises(CodecShapeError):
        vc.decode(np.zeros((2, 2, 3, 5), np.float32))


# -- trained codecs -----------------------------------------------------------------


def test_trained_video_codec_heldout_mse(trained):
    vc = trained.vcodec
    errs = [np.mean((vc.decode(vc.encode(c.video)) - c.video) ** 2) for c in trained.eval_clips]
    assert np.mean(errs) <= 0.05


def test_untrained_codec_does_not_reconstruct(trained):
    vs, _ = shapes(DataConfig(), ModelConfig())
    vc = VideoCodec.init(vs, Rng(5))
    X = trained.eval_clips[0].video
    assert np.mean((vc.decode(vc.encode(X)) - X) ** 2) > 0.05


def test_constant_zero_video_roundtrip(trained):
    vc = trained.vcodec
    X = np.zeros_like(trained.eval_clips[0].video)
    assert np.mean((vc.decode(vc.encode(X)) - X) ** 2) <= 0.05


def test_trained_speech_codec_heldout_mse(trained):
    sc = trained.scodec
    errs = [np.mean((sc.decode(sc.encode(c.features)) - c.features) ** 2) for c in trained.eval_clips]
    assert np.mean(errs) <= 0.05


def test_codec_training_loss_decreases_on_moving_average():
    from reststream.codec import train_video_codec

    vs, _ = shapes(DataConfig(), ModelConfig())
    clips = make_synthetic_corpus(3, 4, vs)
    # batch covers every patch row, so each step is a full epoch
    losses = train_video_codec(VideoCodec.init(vs, Rng(0)), [c.video for c in clips], steps=200, batch=10**6)
    ma = np.convolve(losses, np.ones(10) / 10, mode="valid")[::10]
    assert np.all(np.diff(ma) < 0)


def test_codecs_deterministic_and_persist(trained, tmp_path):
    save_codecs(tmp_path / "c.ckpt", trained.vcodec, trained.scodec)
    vc, sc = load_codecs(tmp_path / "c.ckpt")
    clip = trained.eval_clips[1]
    assert vc.encode(clip.video).tobytes() == trained.vcodec.encode(clip.video).tobytes()
    assert sc.encode(clip.features).tobytes() == trained.scodec.encode(clip.features).tobytes()


# -- speech ----------------------------------------------------------------------


def test_silence_gives_zero_features():
    assert np.array_equal(speech_feature_extract(np.zeros(121 * 64), 121), np.zeros((121, 8), np.float32))


def test_pure_tone_lands_in_its_band():
    spf, bands = 64, 8
    for b in range(1, 32):
        n = np.arange(spf)
        audio = np.tile(np.sin(2 * np.pi * b * n / spf), 3)
        S = speech_feature_extract(audio, 3, bands)
        # rfft bin b (DC dropped) belongs to band (b - 1) // (32 / 8)
        band = (b - 1) // (spf // 2 // bands)
        # pure tone of amplitude 1 over spf samples: |X_b|^2 / spf = spf / 4
        expect = np.zeros(bands)
        expect[band] = np.log1p(spf / 4)
        np.testing.assert_allclose(S, np.tile(expect, (3, 1)), atol=1e-4)


def test_feature_rows_and_alignment_errors():
    assert speech_feature_extract(np.ones(121 * 64), 121).shape == (121, 8)
    with pytest.raises(AlignmentError):
        speech_feature_extract(np.ones(100), 3)


def test_speech_latent_slots_match_video():
    ss = SpeechShape(F=121, Hw=8)
    sc = SpeechCodec.init(ss, Rng(0))
    E = sc.encode(np.zeros((121, 8), np.float32))
    assert E.shape[0] == 16 == FULL_SCALE_VIDEO.f
    # zero features: the latent is the (standardised) encoder bias, identical per slot
    assert np.allclose(E, E[:1])
    with pytest.raises(AlignmentError):
        sc.encode(np.zeros((120, 8), np.float32))
    with pytest.raises(AlignmentError):
        SpeechShape(F=10, Hw=4)


# -- corpus ----------------------------------------------------------------------


def test_corpus_is_deterministic_and_roundtrips(tmp_path):
    vs, ss = shapes(DataConfig(), ModelConfig())
    a = make_synthetic_corpus(11, 3, vs, ss)
    b = make_synthetic_corpus(11, 3, vs, ss)
    for x, y in zip(a, b):
        assert x.video.tobytes() == y.video.tobytes()
        assert x.audio.tobytes() == y.audio.tobytes()
    save_corpus(a, tmp_path, 11, vs, ss)
    back, manifest = load_corpus(tmp_path)
    assert manifest["seed"] == 11
    for x, y in zip(a, back):
        assert x.video.tobytes() == y.video.tobytes()
        assert x.identity == y.identity


def test_silent_span_keeps_aperture_constant():
    vs, ss = shapes(DataConfig(), ModelConfig())
    for c in make_synthetic_corpus(2, 4, vs, ss):
        silent = c.envelope == 0
        assert silent.any()
        assert np.all(c.aperture[silent] == c.aperture[silent][0])
        assert np.all(c.features[silent] == 0)


def test_identity_codes_respect_margin():
    vs, ss = shapes(DataConfig(), ModelConfig())
    clips = make_synthetic_corpus(4, 12, vs, ss)
    codes = [np.concatenate([c.identity["bg"], c.identity["head"]]) for c in clips]
    d = [np.linalg.norm(a - b) for i, a in enumerate(codes) for b in codes[i + 1:]]
    assert min(d) >= 0.6
