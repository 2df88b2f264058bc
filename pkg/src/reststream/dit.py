"""Streaming audio-to-video diffusion transformer with an ID-Context Cache.

Token layout: a latent frame contributes ``h * w`` tokens. Hidden states are
held as ``[frames, h*w, d]``. Every block is

    x = x + gate_sa  * SelfAttn(mod(LN(x)))        keys: [ID sink | context | current]
    x = x + gate_ca  * CrossAttn(mod(LN(x)), audio of the same frame)
    x = x + gate_mlp * MLP(mod(LN(x)))

where ``mod`` is the per-frame timestep modulation ``x * (1 + scale) + shift``.

Time positions are rotary: queries and keys of video frames are rotated by
their frame index (local to the chunk in streaming mode, global in teacher
mode; the two agree because only offsets matter). Scores against the ID sink
use unrotated queries and keys, so the sink has no time position.

The reference latent forms its own stream: its tokens attend only to each
other, carry timestep 0 and receive no audio. Its per-block keys/values are
the ID sink. In teacher mode the same thing happens inside one forward pass,
which is equivalent to full attention over ``[z_R | all frames]`` with the
reference rows masked to the reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .flow import timestep_embedding
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    concat,
    layer_norm,
    linear,
    matmul,
    mul,
    reshape,
    rotate_pairs,
    scale,
    silu,
    gelu,
    softmax,
    swap_last,
    take,
    transpose,
)

NEG = np.float32(-1e9)


class CacheError(RuntimeError):
    pass


class UsageError(RuntimeError):
    pass


# -- parameters ------------------------------------------------------------

def init_params(cfg: ModelConfig, rng: Rng, zero_gates: bool = True) -> dict[str, np.ndarray]:
    """DiT parameters. With ``zero_gates`` the modulation and output heads start at zero
    (adaLN-Zero), so every block is the identity at initialisation."""
    d, dv, dt, da = cfg.d, cfg.dv, cfg.d_t, cfg.d_audio
    hid = cfg.mlp_ratio * d
    T = cfg.tokens_per_frame

    def w(name, shape, fan_in):
        return rng.child(name).normal(shape, 1.0 / np.sqrt(fan_in))

    def z(shape):
        return np.zeros(shape, np.float32)

    p = {
        "in.w": w("in.w", (dv, d), dv),
        "in.b": z(d),
        "pos.spatial": rng.child("pos").normal((T, d), 0.5),
        "t.w1": w("t.w1", (dt, d), dt),
        "t.b1": z(d),
        "t.w2": w("t.w2", (d, d), d),
        "t.b2": z(d),
        "out.mod.w": z((d, 2 * d)) if zero_gates else w("out.mod.w", (d, 2 * d), d),
        "out.mod.b": z(2 * d),
        "out.w": z((d, dv)) if zero_gates else w("out.w", (d, dv), d),
        "out.b": z(dv),
    }
    for j in range(cfg.blocks):
        b = f"blk{j}."
        p.update({
            b + "mod.w": z((d, 9 * d)) if zero_gates else w(b + "mod.w", (d, 9 * d), d),
            b + "mod.b": z(9 * d),
            b + "sa.wq": w(b + "sa.wq", (d, d), d),
            b + "sa.wk": w(b + "sa.wk", (d, d), d),
            b + "sa.wv": w(b + "sa.wv", (d, d), d),
            b + "sa.wo": w(b + "sa.wo", (d, d), d),
            b + "sa.bo": z(d),
            b + "ca.wq": w(b + "ca.wq", (d, d), d),
            b + "ca.wk": w(b + "ca.wk", (da, d), da),
            b + "ca.wv": w(b + "ca.wv", (da, d), da),
            b + "ca.wo": w(b + "ca.wo", (d, d), d),
            b + "ca.bo": z(d),
            b + "mlp.w1": w(b + "mlp.w1", (d, hid), d),
            b + "mlp.b1": z(hid),
            b + "mlp.w2": w(b + "mlp.w2", (hid, d), hid),
            b + "mlp.b2": z(d),
        })
    return p


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def block_params(P: dict[str, Tensor], j: int) -> dict[str, Tensor]:
    pre = f"blk{j}."
    return {k[len(pre):]: v for k, v in P.items() if k.startswith(pre)}


# -- the cache ---------------------------------------------------------------

@dataclass
class IDContextCache:
    """Per-block ID sink plus, per (block, denoising step), the previous chunk's K/V.

    Keys and values are stored raw (before time rotation) with shape
    ``[heads, tokens, head_dim]``. Slots start as zeros and are marked invalid
    until written; invalid slots are masked out of attention, so an all-zero
    cache behaves as an empty history while keeping every chunk's attention
    the same size.
    """

    cfg: ModelConfig
    n_steps: int
    sink_k: list = field(default_factory=list)
    sink_v: list = field(default_factory=list)
    sink_written: bool = False
    ctx_k: list = field(default_factory=list)
    ctx_v: list = field(default_factory=list)
    ctx_valid: list = field(default_factory=list)
    chunk_index: int = 0

    def __post_init__(self):
        c = self.cfg
        sink_shape = (c.heads, c.tokens_per_frame, c.head_dim)
        ctx_shape = (c.heads, c.chunk_len * c.tokens_per_frame, c.head_dim)
        self.sink_k = [Tensor(np.zeros(sink_shape, np.float32)) for _ in range(c.blocks)]
        self.sink_v = [Tensor(np.zeros(sink_shape, np.float32)) for _ in range(c.blocks)]
        self.ctx_k = [[Tensor(np.zeros(ctx_shape, np.float32)) for _ in range(self.n_steps)] for _ in range(c.blocks)]
        self.ctx_v = [[Tensor(np.zeros(ctx_shape, np.float32)) for _ in range(self.n_steps)] for _ in range(c.blocks)]
        self.ctx_valid = [[False] * self.n_steps for _ in range(c.blocks)]

    def write_sink(self, kv: list[tuple[Tensor, Tensor]]) -> None:
        if self.sink_written:
            raise CacheError("the ID sink is written once per stream and is immutable")
        if len(kv) != self.cfg.blocks:
            raise CacheError(f"sink needs {self.cfg.blocks} blocks of K/V, got {len(kv)}")
        for j, (k, v) in enumerate(kv):
            if k.shape != self.sink_k[j].shape or v.shape != self.sink_v[j].shape:
                raise CacheError(f"sink block {j}: got {k.dims}, expected {self.sink_k[j].dims}")
            self.sink_k[j], self.sink_v[j] = k, v
        self.sink_written = True

    def check_step(self, step: int) -> None:
        if not 0 <= step < self.n_steps:
            raise CacheError(f"denoising step {step} outside the cache's 0..{self.n_steps - 1}")

    def write_context(self, j: int, step: int, k: Tensor, v: Tensor) -> None:
        if k.shape != self.ctx_k[j][step].shape or v.shape != self.ctx_v[j][step].shape:
            raise CacheError(
                f"context slot ({j}, {step}) holds {self.ctx_k[j][step].dims}, got {k.dims} / {v.dims}"
            )
        self.ctx_k[j][step], self.ctx_v[j][step] = k, v
        self.ctx_valid[j][step] = True

    def nbytes(self) -> int:
        n = sum(t.data.nbytes for t in self.sink_k + self.sink_v)
        for j in range(self.cfg.blocks):
            n += sum(t.data.nbytes for t in self.ctx_k[j] + self.ctx_v[j])
        return n

    def sink_digest(self) -> str:
        import hashlib

        hsh = hashlib.sha256()
        for t in self.sink_k + self.sink_v:
            hsh.update(t.data.tobytes())
        return hsh.hexdigest()


def naive_history_bytes(cfg: ModelConfig, n_steps: int, chunks_seen: int) -> int:
    """Bytes a cache keeping every previous chunk (plus the sink) would hold."""
    per_chunk = 2 * cfg.blocks * n_steps * cfg.chunk_len * cfg.tokens_per_frame * cfg.d * 4
    sink = 2 * cfg.blocks * cfg.tokens_per_frame * cfg.d * 4
    return sink + max(chunks_seen, 1) * per_chunk


# -- building blocks ---------------------------------------------------------

def rope_tables(positions: np.ndarray, tokens_per_frame: int, head_dim: int, base: float):
    """cos/sin tables [1, n_frames * tokens_per_frame, head_dim] for frame positions."""
    half = head_dim // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    pos = np.repeat(np.asarray(positions, np.float64), tokens_per_frame)
    ang = pos[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=1)
    return np.cos(ang).astype(np.float32)[None], np.sin(ang).astype(np.float32)[None]


def _heads(x: Tensor, heads: int) -> Tensor:
    """[N, d] -> [heads, N, d/heads]"""
    n, d = x.shape
    return transpose(reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge(x: Tensor) -> Tensor:
    """[heads, N, dh] -> [N, heads*dh]"""
    hh, n, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (n, hh * dh))


def qkv(H: Tensor, bp: dict[str, Tensor], heads: int) -> tuple[Tensor, Tensor, Tensor]:
    """Per-head projections of hidden tokens ``[N, d]`` -> three ``[heads, N, dh]``."""
    if H.ndim != 2 or H.shape[1] != bp["sa.wq"].shape[0]:
        raise UsageError(f"hidden states must be [N, {bp['sa.wq'].shape[0]}], got {H.dims}")
    return (
        _heads(matmul(H, bp["sa.wq"]), heads),
        _heads(matmul(H, bp["sa.wk"]), heads),
        _heads(matmul(H, bp["sa.wv"]), heads),
    )


def attend(q: Tensor, q_rot: Tensor, sink_k: Tensor, sink_v: Tensor, keys_rot: Tensor, values: Tensor,
           bias: np.ndarray | None) -> Tensor:
    """Softmax attention over [sink | keys]; sink scores use unrotated q and k."""
    dh = q.shape[-1]
    s_sink = matmul(q, swap_last(sink_k))
    s_rest = matmul(q_rot, swap_last(keys_rot))
    scores = scale(concat([s_sink, s_rest], axis=-1), 1.0 / np.sqrt(dh))
    if bias is not None:
        scores = add(scores, Tensor(bias))
    w = softmax(scores, axis=-1)
    return matmul(w, concat([sink_v, values], axis=1))


def cached_self_attention(
    q: Tensor,
    k_cur: Tensor,
    v_cur: Tensor,
    cache: IDContextCache,
    j: int,
    step: int,
    cfg: ModelConfig,
    *,
    use_sink: bool = True,
    use_context: bool = True,
    update: bool = True,
) -> Tensor:
    """Attention of the current chunk over [ID sink | previous chunk | current chunk].

    Returns the merged per-head output ``[N, d]`` (before the output
    projection and residual). The (block, step) context slot is overwritten
    with this chunk's raw K/V after use when ``update`` is set.
    """
    cache.check_step(step)
    f, T = cfg.chunk_len, cfg.tokens_per_frame
    if k_cur.shape != cache.ctx_k[j][step].shape:
        raise CacheError(f"chunk K/V {k_cur.dims} does not fit context slot {cache.ctx_k[j][step].dims}")
    if use_sink and not cache.sink_written:
        raise CacheError("ID sink requested before it was written")
    k_ctx, v_ctx = cache.ctx_k[j][step], cache.ctx_v[j][step]
    cos_c, sin_c = rope_tables(np.arange(f), T, cfg.head_dim, cfg.rope_base)
    cos_p, sin_p = rope_tables(np.arange(-(f - 1), 1), T, cfg.head_dim, cfg.rope_base)
    q_rot = rotate_pairs(q, cos_c, sin_c)
    keys = concat([rotate_pairs(k_ctx, cos_p, sin_p), rotate_pairs(k_cur, cos_c, sin_c)], axis=1)
    values = concat([v_ctx, v_cur], axis=1)
    bias = np.zeros((q.shape[1], T + 2 * f * T), np.float32)
    if not use_sink:
        bias[:, :T] = NEG
    if not (use_context and cache.ctx_valid[j][step]):
        bias[:, T : T + f * T] = NEG
    out = attend(q, q_rot, cache.sink_k[j], cache.sink_v[j], keys, values, bias)
    if update:
        cache.write_context(j, step, k_cur, v_cur)
    return _merge(out)


def audio_cross_attention(x: Tensor, audio: Tensor, bp: dict[str, Tensor], heads: int) -> Tensor:
    """Frame-level cross attention: frame ``i``'s tokens attend only to audio slot ``i``.

    ``x`` is ``[F, T, d]`` (already normalised/modulated), ``audio`` is
    ``[F, hw, d_A]``. Returns the projected attention delta ``[F, T, d]``.
    """
    F, T, d = x.shape
    if audio.ndim != 3 or audio.shape[0] != F:
        raise UsageError(f"audio slots {audio.dims} not aligned with {F} frames")
    A = audio.shape[1]
    dh = d // heads
    q = transpose(reshape(linear(x, bp["ca.wq"]), (F, T, heads, dh)), (0, 2, 1, 3))
    k = transpose(reshape(linear(audio, bp["ca.wk"]), (F, A, heads, dh)), (0, 2, 1, 3))
    v = transpose(reshape(linear(audio, bp["ca.wv"]), (F, A, heads, dh)), (0, 2, 1, 3))
    w = softmax(scale(matmul(q, swap_last(k)), 1.0 / np.sqrt(dh)), axis=-1)
    o = reshape(transpose(matmul(w, v), (0, 2, 1, 3)), (F, T, d))
    return linear(o, bp["ca.wo"], bp["ca.bo"])


def _modulate(xn: Tensor, shift: Tensor, scl: Tensor) -> Tensor:
    # xn: [F, T, d]; shift/scale: [F, 1, d]
    return add(mul(xn, add(scl, Tensor(np.float32(1.0)))), shift)


def _mod_chunks(P: dict[str, Tensor], prefix: str, c: Tensor, n: int) -> list[Tensor]:
    """Split the per-frame modulation vector into ``n`` tensors of shape [F, 1, d]."""
    m = linear(c, P[prefix + "mod.w"], P[prefix + "mod.b"])
    F = m.shape[0]
    d = m.shape[1] // n
    m = reshape(m, (F, 1, n * d))
    return [take(m, (slice(None), slice(None), slice(i * d, (i + 1) * d))) for i in range(n)]


def time_conditioning(P: dict[str, Tensor], t: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Per-frame conditioning vector silu(MLP(sinusoid(t))) -> [F, d]."""
    emb = Tensor(timestep_embedding(np.asarray(t, np.float32), cfg.d_t))
    hdn = silu(linear(emb, P["t.w1"], P["t.b1"]))
    return silu(linear(hdn, P["t.w2"], P["t.b2"]))


def embed(P: dict[str, Tensor], z: Tensor, cfg: ModelConfig) -> Tensor:
    """Latents [h, w, F, dv] -> tokens [F, h*w, d]."""
    h, w, F, dv = z.shape
    if (h, w, dv) != (cfg.h, cfg.w, cfg.dv):
        raise UsageError(f"latents {z.dims} do not match model grid ({cfg.h}, {cfg.w}, *, {cfg.dv})")
    tok = reshape(transpose(z, (2, 0, 1, 3)), (F, h * w, dv))
    return add(linear(tok, P["in.w"], P["in.b"]), P["pos.spatial"])


def unembed(P: dict[str, Tensor], x: Tensor, c: Tensor, cfg: ModelConfig) -> Tensor:
    """Tokens [F, T, d] -> velocity [h, w, F, dv]."""
    shift, scl = _mod_chunks(P, "out.", c, 2)
    y = linear(_modulate(layer_norm(x), shift, scl), P["out.w"], P["out.b"])
    F = x.shape[0]
    return transpose(reshape(y, (F, cfg.h, cfg.w, cfg.dv)), (1, 2, 0, 3))


def _block_tail(x: Tensor, attn: Tensor, mods: list[Tensor], bp: dict[str, Tensor], audio: Tensor,
                cfg: ModelConfig) -> Tensor:
    """Residual self-attention update followed by the audio and MLP sub-layers."""
    F, T, d = x.shape
    _, _, g_sa, sh_ca, sc_ca, g_ca, sh_mlp, sc_mlp, g_mlp = mods
    sa = reshape(linear(attn, bp["sa.wo"], bp["sa.bo"]), (F, T, d))
    x = add(x, mul(g_sa, sa))
    ca = audio_cross_attention(_modulate(layer_norm(x), sh_ca, sc_ca), audio, bp, cfg.heads)
    x = add(x, mul(g_ca, ca))
    hdn = gelu(linear(_modulate(layer_norm(x), sh_mlp, sc_mlp), bp["mlp.w1"], bp["mlp.b1"]))
    x = add(x, mul(g_mlp, linear(hdn, bp["mlp.w2"], bp["mlp.b2"])))
    return x


def _pre_attn(x: Tensor, mods: list[Tensor]) -> Tensor:
    F, T, d = x.shape
    return reshape(_modulate(layer_norm(x), mods[0], mods[1]), (F * T, d))


# -- forward passes ------------------------------------------------------------

def reference_pass(P: dict[str, Tensor], z_ref: Tensor, cfg: ModelConfig) -> list[tuple[Tensor, Tensor]]:
    """Run the reference latent [h, w, 1, dv] through all blocks; return per-block raw (K, V).

    Reference tokens attend only to themselves, use timestep 0 and no audio,
    so the result is the same for every chunk and every denoising step.
    """
    x = embed(P, z_ref, cfg)
    c = time_conditioning(P, np.zeros(1, np.float32), cfg)
    silent = Tensor(np.zeros((1, cfg.audio_tokens, cfg.d_audio), np.float32))
    kv = []
    for j in range(cfg.blocks):
        bp = block_params(P, j)
        mods = _mod_chunks(P, f"blk{j}.", c, 9)
        q, k, v = qkv(_pre_attn(x, mods), bp, cfg.heads)
        kv.append((k, v))
        if j == cfg.blocks - 1:
            break
        dh = cfg.head_dim
        w = softmax(scale(matmul(q, swap_last(k)), 1.0 / np.sqrt(dh)), axis=-1)
        x = _block_tail(x, _merge(matmul(w, v)), mods, bp, silent, cfg)
    return kv


def prime_cache(P: dict[str, Tensor], z_ref, cache: IDContextCache, cfg: ModelConfig) -> None:
    cache.write_sink(reference_pass(P, z_ref if isinstance(z_ref, Tensor) else Tensor(z_ref), cfg))


def student_forward(
    P: dict[str, Tensor],
    z_chunk: Tensor,
    audio: Tensor,
    t_chunk: np.ndarray,
    cache: IDContextCache,
    step: int,
    cfg: ModelConfig,
    *,
    use_sink: bool = True,
    use_context: bool = True,
    update_cache: bool = True,
) -> Tensor:
    """Velocity for one chunk of latents [h, w, f, dv] given the ID-Context Cache.

    ``t_chunk`` holds one timestep per chunk frame (the reference slot's 0 is
    implicit). ``audio`` is [f, hw, d_A], aligned with the chunk frames.
    """
    if z_chunk.shape[2] != cfg.chunk_len:
        raise UsageError(f"student expects {cfg.chunk_len} frames per chunk, got {z_chunk.shape[2]}")
    x = embed(P, z_chunk, cfg)
    c = time_conditioning(P, t_chunk, cfg)
    for j in range(cfg.blocks):
        bp = block_params(P, j)
        mods = _mod_chunks(P, f"blk{j}.", c, 9)
        q, k, v = qkv(_pre_attn(x, mods), bp, cfg.heads)
        attn = cached_self_attention(
            q, k, v, cache, j, step, cfg, use_sink=use_sink, use_context=use_context, update=update_cache
        )
        x = _block_tail(x, attn, mods, bp, audio, cfg)
    return unembed(P, x, c, cfg)


def teacher_forward(
    P: dict[str, Tensor],
    z_ref: Tensor,
    frames: Tensor,
    audio: Tensor,
    t_frames: np.ndarray,
    cfg: ModelConfig,
    *,
    use_sink: bool = True,
    sink: list[tuple[Tensor, Tensor]] | None = None,
) -> Tensor:
    """Non-streaming velocity for all frames [h, w, N, dv] with full attention.

    Every frame token attends to the reference tokens and to all frame tokens.
    """
    N = frames.shape[2]
    T = cfg.tokens_per_frame
    if sink is None:
        sink = reference_pass(P, z_ref, cfg)
    x = embed(P, frames, cfg)
    c = time_conditioning(P, t_frames, cfg)
    cos, sin = rope_tables(np.arange(N), T, cfg.head_dim, cfg.rope_base)
    bias = None
    if not use_sink:
        bias = np.zeros((N * T, T + N * T), np.float32)
        bias[:, :T] = NEG
    for j in range(cfg.blocks):
        bp = block_params(P, j)
        mods = _mod_chunks(P, f"blk{j}.", c, 9)
        q, k, v = qkv(_pre_attn(x, mods), bp, cfg.heads)
        out = attend(q, rotate_pairs(q, cos, sin), sink[j][0], sink[j][1], rotate_pairs(k, cos, sin), v, bias)
        x = _block_tail(x, _merge(out), mods, bp, audio, cfg)
    return unembed(P, x, c, cfg)


def dit_forward(
    P: dict[str, Tensor],
    z: Tensor,
    audio: Tensor,
    t_vector: np.ndarray,
    cfg: ModelConfig,
    *,
    mode: str,
    cache: IDContextCache | None = None,
    step: int = 0,
    use_sink: bool = True,
    use_context: bool = True,
) -> Tensor:
    """Unified entry point. ``z`` is [h, w, 1 + n, dv] with the reference in slot 0 and
    ``t_vector`` has ``1 + n`` entries starting with 0. Returns velocities for the ``n``
    non-reference frames.

    In student mode the cache must already hold the ID sink unless ``use_sink`` is off;
    when it has not been primed yet it is primed from slot 0 here.
    """
    t_vector = np.asarray(t_vector, np.float32)
    if t_vector.ndim != 1 or t_vector.shape[0] != z.shape[2] or t_vector[0] != 0:
        raise UsageError(f"t_vector must be [0, t_1..t_n] matching {z.shape[2]} slots")
    z_ref = take(z, (slice(None), slice(None), slice(0, 1)))
    frames = take(z, (slice(None), slice(None), slice(1, None)))
    if mode == "teacher":
        if cache is not None:
            raise UsageError("teacher mode takes no cache")
        return teacher_forward(P, z_ref, frames, audio, t_vector[1:], cfg, use_sink=use_sink)
    if mode == "student":
        if cache is None:
            raise UsageError("student mode needs an IDContextCache")
        if not cache.sink_written:
            prime_cache(P, z_ref, cache, cfg)
        return student_forward(P, frames, audio, t_vector[1:], cache, step, cfg,
                               use_sink=use_sink, use_context=use_context)
    raise UsageError(f"unknown mode {mode!r}")


# -- analytic cost model ------------------------------------------------------

def _block_flops(cfg: ModelConfig, n_q: int, n_k: int, n_frames: int) -> int:
    """Matmul FLOPs of one block for ``n_q`` query tokens attending to ``n_k`` keys."""
    d, hid, da = cfg.d, cfg.mlp_ratio * cfg.d, cfg.d_audio
    A, T, dh = cfg.audio_tokens, cfg.tokens_per_frame, cfg.head_dim
    fl = 2 * n_frames * d * 9 * d                 # modulation
    fl += 3 * 2 * n_q * d * d                     # q, k, v
    fl += 2 * cfg.heads * n_q * dh * n_k * 2      # scores + weighted values
    fl += 2 * n_q * d * d                         # output projection
    fl += 2 * n_q * d * d                         # cross-attn q
    fl += 2 * 2 * n_frames * A * da * d           # cross-attn k, v
    fl += 2 * 2 * n_frames * cfg.heads * T * dh * A
    fl += 2 * n_q * d * d                         # cross-attn out
    fl += 2 * 2 * n_q * d * hid                   # MLP
    return fl


def _stem_flops(cfg: ModelConfig, n_frames: int) -> int:
    d, T = cfg.d, cfg.tokens_per_frame
    fl = 2 * n_frames * T * cfg.dv * d                          # input projection
    fl += 2 * n_frames * (cfg.d_t * d + d * d)                  # timestep MLP
    fl += 2 * n_frames * d * 2 * d + 2 * n_frames * T * d * cfg.dv  # output head
    return fl


def student_chunk_flops(cfg: ModelConfig) -> int:
    """FLOPs of one student chunk forward (constant in the chunk index)."""
    f, T = cfg.chunk_len, cfg.tokens_per_frame
    n_q = f * T
    n_k = T + 2 * f * T
    return _stem_flops(cfg, f) + cfg.blocks * _block_flops(cfg, n_q, n_k, f)


def reference_pass_flops(cfg: ModelConfig) -> int:
    T, d = cfg.tokens_per_frame, cfg.d
    per_block = _block_flops(cfg, T, T, 1)
    last = 2 * d * 9 * d + 3 * 2 * T * d * d
    return 2 * T * cfg.dv * d + 2 * (cfg.d_t * d + d * d) + (cfg.blocks - 1) * per_block + last


def teacher_flops(cfg: ModelConfig, n_frames: int) -> int:
    """FLOPs of one teacher forward over ``n_frames`` frames (reference pass included)."""
    T = cfg.tokens_per_frame
    n_q = n_frames * T
    n_k = T + n_frames * T
    return reference_pass_flops(cfg) + _stem_flops(cfg, n_frames) + cfg.blocks * _block_flops(cfg, n_q, n_k, n_frames)
