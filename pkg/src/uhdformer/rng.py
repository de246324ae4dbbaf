"""Deterministic xoshiro256++ generator and labelled substreams.

State is seeded by running splitmix64 from the 64-bit seed. A substream for
``(seed, label)`` is seeded with ``splitmix64(seed ^ fnv1a64(label))``, so
every label yields an independent, reproducible stream.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


class Rng:
    """xoshiro256++ with a few float helpers.

    Not thread-safe; derive a substream per worker instead of sharing.
    """

    def __init__(self, seed: int = 0, *, state: tuple[int, int, int, int] | None = None):
        self.seed = seed & MASK64
        if state is None:
            sm = self.seed
            words = []
            for _ in range(4):
                sm, out = splitmix64(sm)
                words.append(out)
            state = tuple(words)
        if not any(state):
            raise ValueError("xoshiro256++ state must not be all zero")
        self._s = [w & MASK64 for w in state]

    @classmethod
    def from_state(cls, state) -> "Rng":
        return cls(0, state=tuple(state))

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[0] + s[3]) & MASK64, 23) + s[0]) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def random_array(self, count: int) -> np.ndarray:
        # local bindings: this loop dominates noise synthesis time
        s0, s1, s2, s3 = self._s
        out = np.empty(count, dtype=np.float64)
        scale = 1.0 / 9007199254740992.0
        for i in range(count):
            x = (s0 + s3) & MASK64
            result = ((((x << 23) | (x >> 41)) & MASK64) + s0) & MASK64
            t = (s1 << 17) & MASK64
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
            out[i] = (result >> 11) * scale
        self._s = [s0, s1, s2, s3]
        return out

    def uniform_array(self, count: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        return lo + (hi - lo) * self.random_array(count)

    def normal_array(self, count: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Box-Muller normals; consumes ``2*ceil(count/2)`` uniforms."""
        pairs = (count + 1) // 2
        u = self.random_array(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = rad * np.cos(2.0 * math.pi * u2)
        z[1::2] = rad * np.sin(2.0 * math.pi * u2)
        return mean + std * z[:count]


def substream(seed: int, label: str) -> Rng:
    """Independent generator for ``(seed, label)``."""
    return Rng((seed ^ fnv1a64(label)) & MASK64)
