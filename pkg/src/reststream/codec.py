"""Toy video/speech autoencoders and the synthetic talking-blob corpus.

Both codecs are linear patch autoencoders: the video codec patchifies at
``rH x rW x rF`` (the first frame is replicated ``rF - 1`` times so latent
frame 1 covers pixel frame 1 alone) and mixes each patch down to ``dv``
channels; the speech codec does the same over windows of ``rF`` feature rows.
Latents are standardised per channel with statistics measured on the
training corpus.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .optim import AdamState, adam_step
from .rng import Rng
from .tensor import Tensor, linear, mse

log = logging.getLogger(__name__)


class CodecShapeError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


# -- shapes ----------------------------------------------------------------

@dataclass(frozen=True)
class VideoShape:
    H: int
    W: int
    F: int
    rH: int = 8
    rW: int = 8
    rF: int = 4
    Dv: int = 3
    dv: int = 8

    def __post_init__(self):
        bad = []
        if self.H % self.rH:
            bad.append(f"H={self.H} must be divisible by rH={self.rH}")
        if self.W % self.rW:
            bad.append(f"W={self.W} must be divisible by rW={self.rW}")
        if self.F < 1 or (self.F - 1) % self.rF:
            bad.append(f"F-1={self.F - 1} must be divisible by rF={self.rF}")
        if bad:
            raise CodecShapeError("; ".join(bad))

    @property
    def h(self) -> int:
        return self.H // self.rH

    @property
    def w(self) -> int:
        return self.W // self.rW

    @property
    def f(self) -> int:
        return 1 + (self.F - 1) // self.rF

    @property
    def patch_dim(self) -> int:
        return self.rH * self.rW * self.rF * self.Dv

    def with_frames(self, F: int) -> "VideoShape":
        return VideoShape(self.H, self.W, F, self.rH, self.rW, self.rF, self.Dv, self.dv)

    @classmethod
    def for_latent_frames(cls, f: int, **kw) -> "VideoShape":
        rF = kw.get("rF", 4)
        return cls(F=1 + (f - 1) * rF, **kw)


FULL_SCALE_VIDEO = VideoShape(H=512, W=512, F=121, rH=32, rW=32, rF=8, Dv=3, dv=128)


@dataclass(frozen=True)
class SpeechShape:
    """Speech feature/latent geometry.

    ``Fa`` raw samples, ``F`` feature rows (one per video frame), ``Hw`` rows
    per latent window (= the video temporal ratio), ``hw`` audio tokens per
    latent slot, ``D_A`` feature bands, ``d_A`` latent width.
    """

    F: int
    samples_per_frame: int = 64
    Hw: int = 4
    hw: int = 4
    D_A: int = 8
    d_A: int = 8

    def __post_init__(self):
        if self.F < 1 or (self.F - 1) % self.Hw:
            raise AlignmentError(f"F-1={self.F - 1} must be divisible by the window Hw={self.Hw}")

    @property
    def Fa(self) -> int:
        return self.F * self.samples_per_frame

    @property
    def f(self) -> int:
        return 1 + (self.F - 1) // self.Hw


# -- patchify --------------------------------------------------------------

def _check_video(X: np.ndarray, shape: VideoShape) -> None:
    if X.ndim != 4:
        raise CodecShapeError(f"video must be [H, W, F, Dv], got {X.shape}")
    H, W, F, D = X.shape
    VideoShape(H, W, F, shape.rH, shape.rW, shape.rF, shape.Dv, shape.dv)
    if D != shape.Dv:
        raise CodecShapeError(f"video has {D} channels, codec expects {shape.Dv}")


def patchify(X: np.ndarray, rH: int, rW: int, rF: int) -> np.ndarray:
    """[H, W, F, D] -> [h, w, f, rH*rW*rF*D] with first-frame replication."""
    H, W, F, D = X.shape
    pad = np.repeat(X[:, :, :1], rF - 1, axis=2)
    Xp = np.concatenate([pad, X], axis=2)
    h, w, f = H // rH, W // rW, Xp.shape[2] // rF
    P = Xp.reshape(h, rH, w, rW, f, rF, D).transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(P.reshape(h, w, f, rH * rW * rF * D))


def unpatchify(P: np.ndarray, rH: int, rW: int, rF: int, D: int) -> np.ndarray:
    h, w, f, _ = P.shape
    X = P.reshape(h, w, f, rH, rW, rF, D).transpose(0, 3, 1, 4, 2, 5, 6)
    X = X.reshape(h * rH, w * rW, f * rF, D)
    return np.ascontiguousarray(X[:, :, rF - 1 :])


# -- video codec -----------------------------------------------------------

@dataclass
class VideoCodec:
    shape: VideoShape
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, shape: VideoShape, rng: Rng) -> "VideoCodec":
        P, d = shape.patch_dim, shape.dv
        return cls(
            shape,
            {
                "enc_w": rng.child("enc_w").normal((P, d), 1.0 / np.sqrt(P)),
                "enc_b": np.zeros(d, np.float32),
                "dec_w": rng.child("dec_w").normal((d, P), 1.0 / np.sqrt(d)),
                "dec_b": np.zeros(P, np.float32),
                "lat_mean": np.zeros(d, np.float32),
                "lat_std": np.ones(d, np.float32),
            },
        )

    def encode(self, X: np.ndarray) -> np.ndarray:
        """[H, W, F, Dv] -> standardised latents [h, w, f, dv]."""
        _check_video(X, self.shape)
        s = self.shape
        P = patchify(np.asarray(X, np.float32), s.rH, s.rW, s.rF)
        z = P.astype(np.float64) @ self.params["enc_w"] + self.params["enc_b"]
        z = (z - self.params["lat_mean"]) / self.params["lat_std"]
        return z.astype(np.float32)

    def decode(self, Z: np.ndarray) -> np.ndarray:
        """Standardised latents [h, w, f, dv] -> video [H, W, 1 + (f-1) rF, Dv]."""
        s = self.shape
        if Z.ndim != 4 or Z.shape[3] != s.dv:
            raise CodecShapeError(f"latents must be [h, w, f, {s.dv}], got {Z.shape}")
        z = Z.astype(np.float64) * self.params["lat_std"] + self.params["lat_mean"]
        P = z @ self.params["dec_w"] + self.params["dec_b"]
        return unpatchify(P.astype(np.float32), s.rH, s.rW, s.rF, s.Dv)

    def state(self) -> dict[str, np.ndarray]:
        return {f"video.{k}": v for k, v in self.params.items()}


# -- speech features and codec ---------------------------------------------

def speech_feature_extract(audio: np.ndarray, n_frames: int, n_bands: int = 8) -> np.ndarray:
    """Per-video-frame log band energies of a waveform.

    The waveform is cut into ``n_frames`` equal windows; each window's power
    spectrum (DC excluded) is split into ``n_bands`` equal-width bands and the
    feature is ``log1p(mean band power)``. Silence maps to exactly zero.
    """
    audio = np.asarray(audio, dtype=np.float64).reshape(-1)
    if n_frames < 1 or audio.size % n_frames:
        raise AlignmentError(f"{audio.size} samples cannot be split into {n_frames} frames")
    spf = audio.size // n_frames
    n_bins = spf // 2
    if n_bins < n_bands or n_bins % n_bands:
        raise AlignmentError(f"{n_bins} spectral bins cannot form {n_bands} equal bands")
    frames = audio.reshape(n_frames, spf)
    power = np.abs(np.fft.rfft(frames, axis=1)[:, 1 : n_bins + 1]) ** 2 / spf
    band = power.reshape(n_frames, n_bands, n_bins // n_bands).sum(axis=2)
    return np.log1p(band).astype(np.float32)


def _windows(S: np.ndarray, Hw: int) -> np.ndarray:
    """[F, D] -> [f, Hw*D], first row replicated to fill the first window."""
    F, D = S.shape
    if (F - 1) % Hw:
        raise AlignmentError(f"F-1={F - 1} feature rows are not divisible by window {Hw}")
    Sp = np.concatenate([np.repeat(S[:1], Hw - 1, axis=0), S], axis=0)
    return Sp.reshape(-1, Hw * D)


@dataclass
class SpeechCodec:
    shape: SpeechShape
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, shape: SpeechShape, rng: Rng) -> "SpeechCodec":
        P = shape.Hw * shape.D_A
        d = shape.hw * shape.d_A
        return cls(
            shape,
            {
                "enc_w": rng.child("enc_w").normal((P, d), 1.0 / np.sqrt(P)),
                "enc_b": np.zeros(d, np.float32),
                "dec_w": rng.child("dec_w").normal((d, P), 1.0 / np.sqrt(d)),
                "dec_b": np.zeros(P, np.float32),
                "lat_mean": np.zeros(shape.d_A, np.float32),
                "lat_std": np.ones(shape.d_A, np.float32),
            },
        )

    def encode(self, S: np.ndarray) -> np.ndarray:
        """[F, D_A] -> [f, hw, d_A]."""
        s = self.shape
        if S.ndim != 2 or S.shape[1] != s.D_A:
            raise AlignmentError(f"features must be [F, {s.D_A}], got {S.shape}")
        win = _windows(np.asarray(S, np.float32), s.Hw)
        e = win.astype(np.float64) @ self.params["enc_w"] + self.params["enc_b"]
        e = e.reshape(-1, s.hw, s.d_A)
        return ((e - self.params["lat_mean"]) / self.params["lat_std"]).astype(np.float32)

    def decode(self, E: np.ndarray) -> np.ndarray:
        """[f, hw, d_A] -> [1 + (f-1) Hw, D_A]."""
        s = self.shape
        if E.ndim != 3 or E.shape[1:] != (s.hw, s.d_A):
            raise AlignmentError(f"speech latents must be [f, {s.hw}, {s.d_A}], got {E.shape}")
        e = (E.astype(np.float64) * self.params["lat_std"] + self.params["lat_mean"]).reshape(E.shape[0], -1)
        win = (e @ self.params["dec_w"] + self.params["dec_b"]).reshape(-1, s.D_A)
        return win[s.Hw - 1 :].astype(np.float32)

    def state(self) -> dict[str, np.ndarray]:
        return {f"speech.{k}": v for k, v in self.params.items()}


# -- codec training --------------------------------------------------------

def _train_linear_ae(
    rows: np.ndarray,
    params: dict[str, np.ndarray],
    steps: int,
    lr: float,
    batch: int,
    rng: Rng,
) -> tuple[dict[str, np.ndarray], list[float]]:
    names = ["enc_w", "enc_b", "dec_w", "dec_b"]
    state = AdamState()
    losses = []
    cur = {k: params[k] for k in names}
    for step in range(steps):
        if batch >= rows.shape[0]:
            x = Tensor(rows)
        else:
            x = Tensor(rows[rng.child("batch", step).integers(0, rows.shape[0], batch)])
        ps = {k: Tensor(v, requires_grad=True) for k, v in cur.items()}
        z = linear(x, ps["enc_w"], ps["enc_b"])
        xr = linear(z, ps["dec_w"], ps["dec_b"])
        loss = mse(xr, x)
        loss.backward()
        losses.append(loss.item())
        cur, state = adam_step(cur, {k: ps[k].grad for k in names}, state, lr)
    out = dict(params)
    out.update(cur)
    return out, losses


def _standardise(params: dict[str, np.ndarray], rows: np.ndarray, width: int) -> None:
    z = (rows.astype(np.float64) @ params["enc_w"] + params["enc_b"]).reshape(-1, width)
    params["lat_mean"] = z.mean(axis=0).astype(np.float32)
    params["lat_std"] = np.maximum(z.std(axis=0), 1e-6).astype(np.float32)


def train_video_codec(codec: VideoCodec, videos: list[np.ndarray], steps: int = 600, lr: float = 3e-3,
                      batch: int = 256, seed: int = 0) -> list[float]:
    s = codec.shape
    rows = np.concatenate([patchify(v, s.rH, s.rW, s.rF).reshape(-1, s.patch_dim) for v in videos])
    codec.params, losses = _train_linear_ae(rows, codec.params, steps, lr, batch, Rng(seed).child("video-codec"))
    _standardise(codec.params, rows, s.dv)
    return losses


def train_speech_codec(codec: SpeechCodec, feats: list[np.ndarray], steps: int = 600, lr: float = 3e-3,
                       batch: int = 256, seed: int = 0) -> list[float]:
    s = codec.shape
    rows = np.concatenate([_windows(S, s.Hw) for S in feats])
    codec.params, losses = _train_linear_ae(rows, codec.params, steps, lr, batch, Rng(seed).child("speech-codec"))
    _standardise(codec.params, rows, s.d_A)
    return losses


# -- synthetic corpus ------------------------------------------------------

@dataclass(frozen=True)
class MotionParams:
    head_size: float = 14.0
    sway_amplitude: float = 4.0
    sway_period: float = 24.0
    mouth_width: float = 6.0
    mouth_min: float = 1.0
    mouth_gain: float = 5.0
    mouth_offset: float = 3.0
    tone_bins: tuple[int, ...] = (6, 14)
    tone_amplitude: float = 1.0
    identity_margin: float = 0.6


@dataclass
class Clip:
    clip_id: str
    video: np.ndarray          # [H, W, F, 3]
    audio: np.ndarray          # [F * samples_per_frame]
    features: np.ndarray       # [F, D_A]
    reference: np.ndarray      # [H, W, 1, 3]
    envelope: np.ndarray       # [F] audio energy envelope in [0, 1]
    aperture: np.ndarray       # [F] mouth height in pixels
    centers: np.ndarray        # [F, 2] head centre (x, y)
    identity: dict = field(default_factory=dict)

    @property
    def head_color(self) -> np.ndarray:
        return np.asarray(self.identity["head"], np.float32)

    @property
    def mouth_color(self) -> np.ndarray:
        return np.asarray(self.identity["mouth"], np.float32)


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel [p, p+1) covered by the interval [lo, hi)."""
    p = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(p + 1, hi) - np.maximum(p, lo), 0.0, 1.0)


def render_frame(H: int, W: int, bg, head, mouth, center, mp: MotionParams, aperture: float) -> np.ndarray:
    """Area-exact rendering: a square head with a rectangular mouth inside it."""
    cx, cy = center
    half = mp.head_size / 2
    head_cov = np.outer(_coverage(cy - half, cy + half, H), _coverage(cx - half, cx + half, W))
    my = cy + mp.mouth_offset
    mouth_cov = np.outer(
        _coverage(my - aperture / 2, my + aperture / 2, H),
        _coverage(cx - mp.mouth_width / 2, cx + mp.mouth_width / 2, W),
    )
    bg, head, mouth = (np.asarray(c, np.float64) for c in (bg, head, mouth))
    img = bg + head_cov[..., None] * (head - bg) + mouth_cov[..., None] * (mouth - head)
    return img.astype(np.float32)


def _envelope(rng: Rng, F: int) -> np.ndarray:
    t = np.arange(F, dtype=np.float64)
    for attempt in range(100):
        r = rng.child("env", attempt)
        freqs = r.uniform(3, 0.04, 0.16)
        phases = r.uniform(3, 0, 2 * np.pi)
        amps = r.uniform(3, 0.3, 0.6)
        s = 0.15 + sum(a * np.sin(2 * np.pi * fr * t + ph) for a, fr, ph in zip(amps, freqs, phases))
        env = np.clip(s, 0.0, 1.0)
        if env.std() > 0.1 and np.any(env == 0):
            return env.astype(np.float32)
    return env.astype(np.float32)


def _identity(rng: Rng, taken: list[np.ndarray], margin: float) -> dict:
    for attempt in range(1000):
        r = rng.child("identity", attempt)
        bg = r.uniform(3, -0.8, 0.8)
        head = r.uniform(3, -0.8, 0.8)
        if np.linalg.norm(head) < 0.6 or np.min(np.abs(head - bg)) < 0.25:
            continue
        code = np.concatenate([bg, head])
        if all(np.linalg.norm(code - c) >= margin for c in taken):
            taken.append(code)
            return {"bg": bg.tolist(), "head": head.tolist(), "mouth": (-head).tolist()}
    raise RuntimeError("could not sample an identity code at the requested margin")


def make_clip(clip_id: str, rng: Rng, shape: VideoShape, speech: SpeechShape, mp: MotionParams,
              identity: dict) -> Clip:
    H, W, F = shape.H, shape.W, shape.F
    env = _envelope(rng, F)
    phase = rng.child("phase").uniform(2, 0, 2 * np.pi)
    t = np.arange(F, dtype=np.float64)
    cx = W / 2 + mp.sway_amplitude * np.sin(2 * np.pi * t / mp.sway_period + phase[0])
    cy = H / 2 + 0.5 * mp.sway_amplitude * np.sin(2 * np.pi * t / (1.5 * mp.sway_period) + phase[1])
    aperture = mp.mouth_min + mp.mouth_gain * env.astype(np.float64)
    bg, head, mouth = identity["bg"], identity["head"], identity["mouth"]
    frames = [render_frame(H, W, bg, head, mouth, (cx[i], cy[i]), mp, aperture[i]) for i in range(F)]
    video = np.stack(frames, axis=2)
    ref = render_frame(H, W, bg, head, mouth, (W / 2, H / 2), mp, mp.mouth_min)[:, :, None]

    spf = speech.samples_per_frame
    n = np.arange(spf, dtype=np.float64)
    tone = sum(np.sin(2 * np.pi * b * n / spf) for b in mp.tone_bins)
    audio = (mp.tone_amplitude * env[:, None].astype(np.float64) * tone[None, :]).reshape(-1)
    feats = speech_feature_extract(audio, F, speech.D_A)
    return Clip(
        clip_id=clip_id,
        video=video,
        audio=audio.astype(np.float32),
        features=feats,
        reference=ref,
        envelope=env,
        aperture=aperture.astype(np.float32),
        centers=np.stack([cx, cy], axis=1).astype(np.float32),
        identity=identity,
    )


def make_synthetic_corpus(seed: int, n_clips: int, shape: VideoShape, speech: SpeechShape | None = None,
                          motion: MotionParams | None = None) -> list[Clip]:
    """Deterministic clips whose mouth aperture tracks the audio envelope.

    Identity codes (background + head colour) are rejection-sampled so every
    pair is at least ``motion.identity_margin`` apart.
    """
    speech = speech or SpeechShape(F=shape.F, Hw=shape.rF)
    motion = motion or MotionParams()
    if speech.F != shape.F:
        raise AlignmentError(f"speech has {speech.F} frames, video {shape.F}")
    root = Rng(seed).child("corpus")
    taken: list[np.ndarray] = []
    clips = []
    for i in range(n_clips):
        ident = _identity(root.child("id", i), taken, motion.identity_margin)
        clips.append(make_clip(f"clip{i:04d}", root.child("clip", i), shape, speech, motion, ident))
    return clips


def save_corpus(clips: list[Clip], out_dir: str | Path, seed: int, shape: VideoShape, speech: SpeechShape) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": seed, "video_shape": asdict(shape), "speech_shape": asdict(speech), "clips": []}
    for c in clips:
        d = out / c.clip_id
        d.mkdir(exist_ok=True)
        for name in ("video", "audio", "features", "reference", "envelope", "aperture", "centers"):
            formats.save_tensor(d / f"{name}.tnsr", getattr(c, name))
        manifest["clips"].append({"id": c.clip_id, "identity": c.identity, "shape": list(c.video.shape)})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_corpus(in_dir: str | Path) -> tuple[list[Clip], dict]:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    clips = []
    for entry in manifest["clips"]:
        d = root / entry["id"]
        arrays = {n: formats.load_tensor(d / f"{n}.tnsr") for n in
                  ("video", "audio", "features", "reference", "envelope", "aperture", "centers")}
        clips.append(Clip(clip_id=entry["id"], identity=entry["identity"], **arrays))
    return clips, manifest
