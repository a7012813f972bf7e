"""SplitMix64 generator and the Fisher-Yates shuffle built on it.

Everything that must be bit-reproducible across platforms (bias
exclusions, epoch shuffles, MLP initialization) draws from here rather
than from numpy's generators.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class Rng64State:
    state: int

    def __post_init__(self):
        object.__setattr__(self, "state", self.state & MASK64)


def mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def rng_next(state: Rng64State) -> tuple[Rng64State, int]:
    s = (state.state + GOLDEN_GAMMA) & MASK64
    return Rng64State(s), mix64(s)


class SplitMix64:
    """Mutable convenience wrapper around :func:`rng_next`."""

    def __init__(self, seed: int):
        self.state = Rng64State(seed)

    def next_u64(self) -> int:
        self.state, out = rng_next(self.state)
        return out

    def next_float(self) -> float:
        # 53 high bits -> uniform double in [0, 1)
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float, size: int) -> np.ndarray:
        return np.array([low + (high - low) * self.next_float() for _ in range(size)])


def splitmix_stream(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of SplitMix64(seed) as a uint64 array."""
    k = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + k * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def shuffle_indices(n: int, seed: int) -> list[int]:
    """Fisher-Yates permutation of ``range(n)`` driven by SplitMix64(seed)."""
    perm = list(range(n))
    rng = SplitMix64(seed)
    for i in range(n - 1, 0, -1):
        j = rng.next_u64() % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h
