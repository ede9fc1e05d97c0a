"""Deterministic random streams keyed by (seed, stream).

Every source of randomness in the package draws from an Rng. The same
(seed, stream) pair always yields the same sample sequence, regardless
of process, thread count, or call site, because each Rng owns a
counter-based Philox generator keyed directly by the pair.
"""

from __future__ import annotations

import numpy as np

# Fixed stream offsets so independent consumers never share a sequence.
STREAM_INIT = 0
STREAM_SHUFFLE = 1 << 20
STREAM_S3P = 1 << 21
STREAM_CHECK = 1 << 22


class Rng:
    """A named, reproducible random stream."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF],
                       dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, stream: int) -> "Rng":
        """Fresh Rng with the same seed on a different stream."""
        return Rng(self.seed, stream)

    def normal(self, shape, std=1.0, dtype=np.float64) -> np.ndarray:
        return (self.gen.standard_normal(size=shape) * std).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float64) -> np.ndarray:
        return self.gen.uniform(low, high, size=shape).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def integers(self, low, high, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size=size)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), unsorted."""
        return self.gen.choice(n, size=k, replace=False)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"
