"""splitmix64 streams.

Counter-based, so a stream can hand out a vector of draws in one numpy call and
stay bit-identical to drawing them one at a time.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_INV_2_53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Seed of an independent substream, e.g. ``derive_seed(seed, sequence_index)``."""
    h = mix64(seed & MASK64)
    for k in keys:
        h = mix64((h + GOLDEN_GAMMA * ((k & MASK64) + 1)) & MASK64)
    return h


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def u64_array(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            out = _mix64_array(z)
        self.state = (self.state + GOLDEN_GAMMA * n) & MASK64
        return out

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller; consumes 2*ceil(n/2) draws."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n] if n else np.empty(0)

    def gauss(self) -> float:
        return float(self.normal(1)[0])

    def shuffle(self, items: list) -> list:
        """Fisher-Yates, in place; returns ``items`` for chaining."""
        for i in range(len(items) - 1, 0, -1):
            j = int(self.random() * (i + 1))
            items[i], items[j] = items[j], items[i]
        return items
