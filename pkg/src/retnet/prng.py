"""SplitMix64 random stream.

The generator is stateless mixing of a counter: output ``i`` of a stream
seeded with ``seed`` is ``mix(seed + (i + 1) * 0x9E3779B97F4A7C15)`` (mod 2**64),
where

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Doubles in [0, 1) take the top 53 bits: ``(z >> 11) * 2**-53``.  Normals use
Box-Muller on consecutive pairs of doubles (cosine branch only).  Everything
is plain 64-bit integer arithmetic, so streams agree across platforms.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
MASK64 = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * MIX1
        z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


class Prng:
    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & MASK64
        self.counter = 0

    def next_u64(self, count: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * GOLDEN
        return mix64(z)

    def uniform(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform((n, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u is in (0, 1]
        return (std * r * np.cos(2.0 * np.pi * u[:, 1])).reshape(shape)

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        """Uniform ids in ``[low, high)``."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def fork(self, tag: int) -> "Prng":
        """Independent stream derived from this seed and ``tag``."""
        return Prng(int(mix64(np.uint64((self.seed ^ (tag * 0x9E3779B97F4A7C15)) & MASK64))))
