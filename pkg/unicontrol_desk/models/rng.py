"""
RNG - Portable 64-bit generators for scene synthesis and text hashing
SplitMix64 seeds xoshiro256++; both are defined on unsigned 64-bit integers
so every platform draws the same stream.
"""

from typing import List, MutableSequence, Sequence, TypeVar

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
TWO_POW_MINUS_53 = 2.0**-53

T = TypeVar("T")


def mix64(z: int) -> int:
    """SplitMix64 output function."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Per-item seed: first SplitMix64 output of the stream seeded by seed XOR index."""
    return mix64(((seed ^ index) + GOLDEN_GAMMA) & MASK64)


class SplitMix64:
    """Weyl-sequence generator used for seeding and token hashing."""

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256PlusPlus:
    """xoshiro256++ with convenience draws used by the scene synthesizer."""

    def __init__(self, state: Sequence[int]) -> None:
        if len(state) != 4 or not any(state):
            raise ValueError("xoshiro256++ needs four words, not all zero")
        self.s: List[int] = [word & MASK64 for word in state]

    @classmethod
    def from_seed(cls, seed: int) -> "Xoshiro256PlusPlus":
        seeder = SplitMix64(seed)
        return cls([seeder.next_u64() for _ in range(4)])

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[0] + s[3]) & MASK64, 23) + s[0]) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """Float in [low, high) with 53 random bits."""
        return low + (high - low) * ((self.next_u64() >> 11) * TWO_POW_MINUS_53)

    def integers(self, low: int, high: int) -> int:
        """Integer in [low, high)."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        return low + ((self.next_u64() >> 11) * (high - low) >> 53)

    def choice(self, items: Sequence[T]) -> T:
        return items[self.integers(0, len(items))]

    def shuffle(self, items: MutableSequence[T]) -> None:
        """Fisher-Yates in place."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]
