"""Adam and global-norm gradient clipping over named numpy parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are not mutated."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        g = g.astype(np.float64)
        m = beta1 * state.m.get(name, np.zeros(p.shape)).astype(np.float64) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros(p.shape)).astype(np.float64) + (1 - beta2) * g * g
        upd = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[name] = (p.astype(np.float64) - upd).astype(np.float32)
        new_m[name] = m.astype(np.float32)
        new_v[name] = v.astype(np.float32)
    return new_params, AdamState(step=t, m=new_m, v=new_v)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    # summed in name order so the value does not depend on dict insertion order
    return float(np.sqrt(sum(float(np.sum(grads[k].astype(np.float64) ** 2)) for k in sorted(grads))))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm or norm == 0.0:
        return grads, norm
    s = np.float32(max_norm / norm)
    return {k: g * s for k, g in grads.items()}, norm
