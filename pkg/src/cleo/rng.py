"""Deterministic PRNG: splitmix64-seeded xoshiro256** with Box-Muller normals.

Reproducibility here is algorithmic rather than library-dependent: the same
seed yields the same stream on any platform, and substreams derived from
(seed, index...) are independent of scheduling order.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_INV_2_53 = 2.0 ** -53


def _mix64(z: int) -> int:
    # splitmix64 finalizer (Steele, Lea, Flood 2014)
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return z


def splitmix64(seed: int):
    """Infinite generator of 64-bit outputs from the splitmix64 recurrence."""
    state = seed & _MASK64
    while True:
        state = (state + _GOLDEN) & _MASK64
        yield _mix64(state)


def derive_seed(seed: int, *indices: int) -> int:
    """Fold indices into a seed, one splitmix64 step per index.

    Used to give scenes, tasks, etc. independent substreams from a single
    experiment seed.
    """
    s = _mix64((seed + _GOLDEN) & _MASK64)
    for ix in indices:
        s = _mix64((s ^ ((ix + 1) * _GOLDEN)) & _MASK64)
    return s


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** 1.0 (Blackman & Vigna), state seeded via splitmix64."""

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, seed: int):
        sm = splitmix64(seed)
        self.s0 = next(sm)
        self.s1 = next(sm)
        self.s2 = next(sm)
        self.s3 = next(sm)

    def next_u64(self) -> int:
        s1 = self.s1
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        self.s2 ^= self.s0
        self.s3 ^= s1
        self.s1 ^= self.s2
        self.s0 ^= self.s3
        self.s2 ^= t
        self.s3 = _rotl(self.s3, 45)
        return result

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform_open(self) -> float:
        """Uniform in (0, 1]; safe as a log argument."""
        return ((self.next_u64() >> 11) + 1) * _INV_2_53

    def normal_pair(self) -> tuple[float, float]:
        # Box-Muller transform; u1 in (0,1] keeps the log finite.
        u1 = self.uniform_open()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        a = 2.0 * math.pi * u2
        return r * math.cos(a), r * math.sin(a)

    def normals(self, n: int) -> list[float]:
        """n standard normal draws; pairs are generated and truncated."""
        out = []
        for _ in range((n + 1) // 2):
            z0, z1 = self.normal_pair()
            out.append(z0)
            out.append(z1)
        return out[:n]

    def below(self, bound: int) -> int:
        """Unbiased integer in [0, bound) via rejection sampling."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        threshold = (1 << 64) % bound
        while True:
            r = self.next_u64()
            if r >= threshold:
                return r % bound

    def shuffle(self, items) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def unit_vector(self, dim: int) -> list[float]:
        """Uniform direction on the (dim-1)-sphere via normalized normals."""
        while True:
            v = self.normals(dim)
            norm = math.sqrt(sum(x * x for x in v))
            if norm > 1e-12:
                return [x / norm for x in v]
