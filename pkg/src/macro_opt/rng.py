"""Portable PRNG: SplitMix64 seeding, xoshiro256** stream, Box-Muller normals.

Everything is defined by the algorithm, not by numpy's generators, so the
sample sequence is reproducible from any language:

* ``splitmix64`` state += 0x9E3779B97F4A7C15, output mixed by the usual two
  multiply/xor-shift rounds.
* xoshiro256** seeded with four consecutive splitmix64 outputs.
* uniforms in (0, 1) are ``((x >> 11) + 0.5) * 2**-53``.
* normals come in pairs from Box-Muller:
  ``sqrt(-2 ln u1) * cos(2 pi u2)`` then ``sqrt(-2 ln u1) * sin(2 pi u2)``.
"""

from __future__ import annotations

import math

import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """Return ``(new_state, output)``."""
    state = (state + GOLDEN) & MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *path: int) -> int:
    """Fold integers into a seed with splitmix64; used for per-run and per-step streams."""
    state = seed & MASK
    for p in path:
        state, out = splitmix64(state ^ (p & MASK))
        state = out
    return state


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK


class Xoshiro256:
    """xoshiro256** generator."""

    def __init__(self, seed: int):
        state = seed & MASK
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self.s = s
        self._spare = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK, 7) * 9) & MASK
        t = (s1 << 17) & MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        return ((self.next_u64() >> 11) + 0.5) * (1.0 / (1 << 53))

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normals(self, shape, scale: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        return np.array([self.normal() for _ in range(n)], dtype=np.float64).reshape(shape) * scale

    def integers(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` (modulo reduction; bias is below 2**-40 for n < 2**24)."""
        if n < 1:
            raise ValueError(f"integers() needs n >= 1, got {n}")
        return self.next_u64() % n
