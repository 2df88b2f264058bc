"""Model, training and run configuration with a versioned JSON schema.

Config files look like::

    {"schema_version": 1,
     "model": {...ModelConfig fields...},
     "train": {...TrainConfig fields...},
     "ablation": {...Ablation fields...},
     "data": {...DataConfig fields...}}

Every section is optional; unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Ablation:
    no_id_sink: bool = False
    no_context_cache: bool = False
    no_asd: bool = False
    no_smooth: bool = False
    no_contrastive: bool = False

    @classmethod
    def from_flags(cls, flags) -> "Ablation":
        names = {f.name for f in fields(cls)}
        flags = [f for f in (flags or []) if f]
        unknown = [f for f in flags if f not in names]
        if unknown:
            raise ConfigError(f"unknown ablation flag(s) {unknown}; choose from {sorted(names)}")
        return cls(**{f: True for f in flags})

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]


@dataclass(frozen=True)
class ModelConfig:
    h: int = 4
    w: int = 4
    dv: int = 8
    d: int = 64
    heads: int = 4
    blocks: int = 4
    chunk_len: int = 4
    d_t: int = 32
    audio_tokens: int = 4
    d_audio: int = 8
    mlp_ratio: int = 4
    rope_base: float = 100.0
    steps: int = 8
    cfg_alpha: float = 6.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"model dim {self.d} is not divisible by {self.heads} heads")
        if (self.d // self.heads) % 2:
            raise ConfigError("head dim must be even for rotary time positions")
        if self.chunk_len < 2:
            raise ConfigError("chunk_len must be >= 2")
        if self.blocks < 1 or self.steps < 1:
            raise ConfigError("blocks and steps must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def tokens_per_frame(self) -> int:
        return self.h * self.w


FULL_SCALE_MODEL = ModelConfig(h=16, w=16, dv=128, d=1152, heads=16, blocks=28, chunk_len=4)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 1
    lambda_con: float = 1.0
    lambda_smo: float = 1.0
    tau: float = 0.07
    steps: int = 200
    seed: int = 0
    grad_clip: float = 1.0
    audio_drop: float = 0.1
    sink_drop: float = 0.1
    contrastive_variant: str = "printed"
    smooth_variant: str = "divergence"
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda_con < 0 or self.lambda_smo < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.tau <= 0:
            raise ConfigError("temperature must be > 0")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported")
        if self.contrastive_variant not in ("printed", "infonce"):
            raise ConfigError(f"contrastive_variant must be 'printed' or 'infonce', got {self.contrastive_variant!r}")
        if self.smooth_variant not in ("divergence", "literal"):
            raise ConfigError(f"smooth_variant must be 'divergence' or 'literal', got {self.smooth_variant!r}")


@dataclass(frozen=True)
class DataConfig:
    H: int = 32
    W: int = 32
    chunks: int = 3
    n_clips: int = 16
    n_eval_clips: int = 4
    seed: int = 0
    codec_steps: int = 600


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: Ablation = field(default_factory=Ablation)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **{k: asdict(getattr(self, k)) for k in _SECTIONS}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, **sections) -> "RunConfig":
        out = self
        for name, vals in sections.items():
            if not vals:
                continue
            out = replace(out, **{name: _build(_SECTIONS[name], {**asdict(getattr(out, name)), **vals}, name)})
        return out


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "ablation": Ablation, "data": DataConfig}


def _build(cls, values: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {unknown}")
    return cls(**values)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"schema_version"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    sections = {}
    for name, cls in _SECTIONS.items():
        vals = raw.get(name, {})
        if not isinstance(vals, dict):
            raise ConfigError(f"section '{name}' must be an object")
        sections[name] = _build(cls, vals, name)
    return RunConfig(**sections)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)
