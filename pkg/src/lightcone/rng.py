"""Seeded random streams.

All randomness in the package flows through :class:`RandomState`, a thin
wrapper over numpy's PCG64 bit generator. Gaussian variates are produced
with the Box-Muller transform on PCG64 uniforms so that the full sampling
path is documented and reproducible bit for bit.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "PCG64 uniforms + Box-Muller normals"


class RandomState:
    """A deterministic random stream identified by ``(seed, key)``.

    Independent streams for parallel or resumable work are derived with
    :meth:`spawn`, which hashes the parent seed and a tuple of integer keys
    through :class:`numpy.random.SeedSequence`.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self):
        return f"RandomState(seed={self.seed}, key={self.key})"

    def spawn(self, *key: int) -> "RandomState":
        return RandomState(self.seed, self.key + tuple(key))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return low + (high - low) * self._gen.random(size)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        # 1 - U lies in (0, 1], so the log never sees zero
        u1 = 1.0 - self._gen.random(m)
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return out.reshape(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
