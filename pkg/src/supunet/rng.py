"""Counter-based SplitMix64 generator.

The k-th output (k = 1, 2, ...) of a stream seeded with ``s`` is
``mix64(s + k * 0x9E3779B97F4A7C15 mod 2**64)`` where ``mix64`` is the
SplitMix64 finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Because each output depends only on its index, whole blocks are generated
with vectorized uint64 arithmetic. Uniforms take the top 53 bits; normals use
Box-Muller on consecutive pairs (u1, u2) with u1 shifted into (0, 1] and the
pair producing (r cos 2 pi u2, r sin 2 pi u2).
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_2POW_M53 = 2.0**-53


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    z = np.array([value & _MASK], dtype=np.uint64)
    return int(_mix(z)[0])


def derive_seed(base: int, *keys: int) -> int:
    """Fold integer keys into ``base`` to get an independent stream seed."""
    s = base & _MASK
    for k in keys:
        s = mix64((s + (k + 1) * GAMMA) & _MASK)
    return s


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self.counter = 0

    def next_u64(self, count: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(GAMMA)
            return _mix(z)

    def uniform(self, count: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(count) >> np.uint64(11)).astype(np.float64) * _2POW_M53
        return low + (high - low) * u

    def normal(self, count: int) -> np.ndarray:
        pairs = (count + 1) // 2
        raw = (self.next_u64(2 * pairs) >> np.uint64(11)).astype(np.float64)
        u1 = (raw[0::2] + 1.0) * _2POW_M53
        u2 = raw[1::2] * _2POW_M53
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:count]

    def integers(self, count: int, high: int) -> np.ndarray:
        """Integers in [0, high) via multiply-shift on the top 32 bits."""
        top = self.next_u64(count) >> np.uint64(32)
        return ((top * np.uint64(high)) >> np.uint64(32)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n), swapping from the top down."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.next_u64(n - 1) >> np.uint64(11)
        for step, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[step]) % (i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
