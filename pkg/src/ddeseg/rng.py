"""Portable seeded random number generator.

All synthetic-data randomness goes through :class:`Xoshiro256`, a
xoshiro256** generator seeded via splitmix64.  The sequence depends only
on the 64-bit seed, so datasets are bit-identical across platforms and
numpy/torch versions.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def mix_seed(seed: int, index: int) -> int:
    """Derive an independent per-item seed from (seed, index)."""
    _, a = splitmix64(seed & _MASK64)
    _, b = splitmix64((index & _MASK64) ^ 0xD1B54A32D192ED03)
    return (a ^ (b * 0x9E3779B97F4A7C15)) & _MASK64


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256:
    """xoshiro256** with splitmix64 seed expansion."""

    def __init__(self, seed: int):
        self._gauss_spare: float | None = None
        state = seed & _MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        if all(v == 0 for v in s):  # all-zero state is a fixed point
            s[0] = 1
        self._s = s

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        """Gaussian sample via Box-Muller (spare cached)."""
        if self._gauss_spare is not None:
            z = self._gauss_spare
            self._gauss_spare = None
        else:
            u1 = self.random()
            while u1 <= 1e-300:
                u1 = self.random()
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            z = r * math.cos(2.0 * math.pi * u2)
            self._gauss_spare = r * math.sin(2.0 * math.pi * u2)
        return mu + sigma * z

    def gumbel(self) -> float:
        """Standard Gumbel(0, 1) sample."""
        u = self.random()
        while u <= 1e-300:
            u = self.random()
        return -math.log(-math.log(u))

    def choice(self, seq):
        return seq[self.randint(len(seq))]

    def sample_without_replacement(self, n: int, count: int) -> list[int]:
        if count > n:
            raise ValueError("count > n")
        pool = list(range(n))
        picked = []
        for _ in range(count):
            i = self.randint(len(pool))
            picked.append(pool.pop(i))
        return picked

    def shuffle(self, seq: list) -> None:
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]
