"""Central finite-difference gradient checks for scalar functions of named arrays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rng import Rng
from .tensor import Tensor


@dataclass
class GradReport:
    rel_error: float
    n_coords: int
    analytic_norm: float
    numeric_norm: float

    def ok(self, tol: float) -> bool:
        return self.rel_error <= tol


def gradcheck(fn: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray], eps: float = 1e-3,
              max_coords: int = 24, seed: int = 0, names: list[str] | None = None) -> GradReport:
    """Compare autodiff gradients of ``fn`` against central differences.

    ``fn`` maps leaf tensors to a scalar Tensor. Up to ``max_coords`` coordinates
    per parameter are sampled; the reported error is
    ``||g_auto - g_num|| / max(||g_auto||, ||g_num||)`` over all sampled coordinates.
    """
    names = names or sorted(params)
    leaves = {k: Tensor(v, requires_grad=k in names) for k, v in params.items()}
    fn(leaves).backward()
    rng = Rng(seed).child("gradcheck")
    auto, num = [], []
    for name in names:
        base = np.asarray(params[name], np.float32)
        g = leaves[name].grad if leaves[name].grad is not None else np.zeros_like(base)
        flat = base.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_coords else rng.child(name).gen.choice(n, max_coords, replace=False)
        for i in idx:
            vals = []
            for sgn in (1.0, -1.0):
                pert = flat.copy()
                pert[i] = np.float32(flat[i] + sgn * eps)
                trial = {k: Tensor(v) for k, v in params.items()}
                trial[name] = Tensor(pert.reshape(base.shape))
                vals.append(float(fn(trial).item()))
            auto.append(float(g.reshape(-1)[i]))
            num.append((vals[0] - vals[1]) / (2 * eps))
    a, b = np.asarray(auto), np.asarray(num)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    denom = max(na, nb, 1e-12)
    return GradReport(float(np.linalg.norm(a - b) / denom), a.size, na, nb)
