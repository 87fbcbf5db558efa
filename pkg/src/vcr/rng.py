"""Deterministic random streams shared by every randomized operation.

The generator is SplitMix64 run in counter mode: output t of a stream with
seed s is ``mix64(s + t * GOLDEN)`` for t = 1, 2, ...  A stream can therefore
be consumed one value at a time or as a vectorized block with bit-identical
results; both paths are pure 64-bit integer arithmetic, so identical seeds
give identical streams on every platform.

Derived quantities are pinned here once and reused everywhere:

* bounded integers: rejection sampling (no modulo bias),
* floats in [0, 1): top 53 bits of one output,
* Gaussians: Box-Muller over pairs of outputs,
* per-image seeds: ``FNV-1a(image_id) XOR global_seed``,
* substreams: ``mix64(seed + (index + 1) * GOLDEN)``.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

_FNV_BASIS = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

_INV_2_53 = 2.0**-53


def fnv1a64(data: bytes | str) -> int:
    """64-bit FNV-1a hash; str input is UTF-8 encoded first."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = _FNV_BASIS
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & MASK64
    return h


def mix64(z: int) -> int:
    """SplitMix64 output mix; bijective on 64-bit integers."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def image_seed(global_seed: int, image_id: str) -> int:
    """Per-image seed, independent of scheduling or worker count."""
    return (fnv1a64(image_id) ^ global_seed) & MASK64


def substream_seed(seed: int, index: int) -> int:
    """Seed for substream `index` of a parent stream (index >= 0)."""
    return mix64((seed + (index + 1) * GOLDEN) & MASK64)


def tagged_seed(seed: int, tag: str) -> int:
    """Seed for a named substream; tags keep unrelated draws uncorrelated."""
    return mix64(seed ^ fnv1a64(tag))


class SplitMix64:
    """Counter-based SplitMix64 stream."""

    def __init__(self, seed: int):
        self._seed = seed & MASK64
        self._count = 0

    def next_u64(self) -> int:
        self._count += 1
        return mix64((self._seed + self._count * GOLDEN) & MASK64)

    def block_u64(self, k: int) -> np.ndarray:
        """Next k outputs as a uint64 array; same stream as next_u64."""
        t = np.arange(self._count + 1, self._count + k + 1, dtype=np.uint64)
        self._count += k
        counters = np.uint64(self._seed) + t * np.uint64(GOLDEN)
        return _mix64_array(counters)

    def bounded(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection; unbiased for any n >= 1."""
        if n <= 0:
            raise ValueError(f"bounded() needs n >= 1, got {n}")
        if n == 1:
            self.next_u64()
            return 0
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def uniform(self) -> float:
        """Uniform float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform_block(self, k: int) -> np.ndarray:
        return (self.block_u64(k) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def gaussian_block(self, k: int) -> np.ndarray:
        """k standard Gaussians via Box-Muller; consumes 2k outputs."""
        u = self.block_u64(2 * k)
        # u1 in (0, 1] so the log is finite; u2 in [0, 1).
        u1 = ((u[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (u[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def gaussian_matrix(seeds: np.ndarray, k: int) -> np.ndarray:
    """Row i holds the first k Gaussians of the stream seeded by seeds[i].

    Bit-identical to ``SplitMix64(seeds[i]).gaussian_block(k)`` for each row,
    but vectorized over all rows at once.
    """
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1)
    t = np.arange(1, 2 * k + 1, dtype=np.uint64)
    counters = seeds[:, None] + t[None, :] * np.uint64(GOLDEN)
    u = _mix64_array(counters)
    u1 = ((u[:, 0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
    u2 = (u[:, 1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
