"""Splittable counter-based random streams.

Each stream is a Philox-4x64 generator keyed by a 128-bit key. Child streams
are derived by folding a label into the parent key with the SplitMix64
finaliser, so ``Rng(7).child("noise", 3)`` is the same stream on every run and
every platform, independent of how many draws the parent has made.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _label_word(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & _MASK
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    def __init__(self, seed: int, _key: tuple[int, int] | None = None):
        self.seed = int(seed)
        self.key = _key if _key is not None else (splitmix64(self.seed & _MASK), splitmix64(~self.seed & _MASK))
        self._gen: np.random.Generator | None = None

    def child(self, *labels) -> "Rng":
        k0, k1 = self.key
        for lab in labels:
            w = _label_word(lab)
            k0 = splitmix64(k0 ^ w)
            k1 = splitmix64(k1 ^ splitmix64(w ^ k0))
        return Rng(self.seed, (k0, k1))

    @property
    def gen(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.Philox(key=np.array(self.key, dtype=np.uint64)))
        return self._gen

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return (self.gen.standard_normal(shape) * scale).astype(np.float32)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        out = self.gen.uniform(low, high, shape)
        return out if shape is None else out.astype(np.float32)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size)
