"""Rectified-flow forward process, regression target, loss and Euler integrator.

Latent tensors use the [h, w, f, c] layout; timesteps are given per latent
frame (axis 2) or as a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _as_tensor, add, mse, mul, scale, sub

FRAME_AXIS = 2


class DomainError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


def _per_frame(t, like: Tensor) -> np.ndarray:
    t = np.asarray(t, dtype=np.float32)
    if t.size and (np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t))):
        raise DomainError(f"timesteps must lie in [0, 1], got range [{t.min()}, {t.max()}]")
    if t.ndim == 0:
        return t
    if t.ndim != 1 or like.ndim != 4 or t.shape[0] != like.shape[FRAME_AXIS]:
        raise DomainError(f"need one timestep per frame: t has {t.shape}, latents {like.dims}")
    return t.reshape(1, 1, -1, 1)


def add_noise(z0, eps, t) -> Tensor:
    """(1 - t) * z0 + t * eps, with t broadcast over space and channels."""
    z0, eps = _as_tensor(z0), _as_tensor(eps)
    if z0.shape != eps.shape:
        raise DomainError(f"z0 {z0.dims} and eps {eps.dims} differ in shape")
    tt = _per_frame(t, z0)
    return add(mul(z0, Tensor(np.float32(1.0) - tt)), mul(eps, Tensor(tt)))


def flow_target(z0, eps) -> Tensor:
    return sub(_as_tensor(eps), _as_tensor(z0))


def fm_loss(v_pred, v_target) -> Tensor:
    return mse(_as_tensor(v_pred), _as_tensor(v_target))


def euler_step(zt, v_pred, t_from: float, t_to: float) -> Tensor:
    if not t_from > t_to:
        raise ScheduleError(f"reverse-time step needs t_from > t_to, got {t_from} -> {t_to}")
    return add(_as_tensor(zt), scale(_as_tensor(v_pred), float(t_to) - float(t_from)))


@dataclass(frozen=True)
class TimeSchedule:
    """Strictly decreasing timesteps ending at 0."""

    steps: tuple[float, ...]

    def __post_init__(self):
        s = self.steps
        if len(s) < 2:
            raise ScheduleError("a schedule needs at least two timesteps")
        if s[0] > 1.0 or s[-1] != 0.0:
            raise ScheduleError(f"schedule must start at <= 1 and end at 0, got {s[0]} .. {s[-1]}")
        if any(b >= a for a, b in zip(s, s[1:])):
            raise ScheduleError(f"schedule must be strictly decreasing: {s}")

    @classmethod
    def uniform(cls, n_steps: int) -> "TimeSchedule":
        """``n_steps`` Euler steps from 1 to 0 (so n_steps + 1 knots)."""
        if n_steps < 1:
            raise ScheduleError("need at least one step")
        return cls(tuple(float(x) for x in np.linspace(1.0, 0.0, n_steps + 1)))

    @property
    def n_steps(self) -> int:
        return len(self.steps) - 1

    def pairs(self):
        return list(zip(self.steps[:-1], self.steps[1:]))


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 1000.0) -> np.ndarray:
    """Sinusoidal features [cos | sin] of ``t * 1000`` for each entry of 1-D ``t``."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * 1000.0 * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(np.float32)
