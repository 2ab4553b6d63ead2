"""Counter-based SplitMix64 generator.

All randomness in the package goes through this generator so that
datasets and initial weights are reproducible bit-for-bit, independent
of numpy's global RNG or its version.

Stream definition: with 64-bit state ``s`` the i-th output (i = 1, 2, ...)
is ``mix(s + i * 0x9E3779B97F4A7C15)`` where ``mix`` is the SplitMix64
finalizer (xor-shift 30/27/31, multipliers 0xBF58476D1CE4E5B9 and
0x94D049BB133111EB). Floats take the top 53 bits.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(value: int) -> int:
    return int(mix64(np.array([value & MASK64], dtype=np.uint64))[0])


class SplitMix64:
    def __init__(self, seed: int):
        self.state = _mix_int(int(seed) & MASK64)

    def spawn(self, key: int) -> "SplitMix64":
        """Independent child stream keyed by an integer (e.g. a sample index)."""
        child = SplitMix64.__new__(SplitMix64)
        child.state = _mix_int(self.state ^ _mix_int(int(key) + 1))
        return child

    def u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN)
        out = mix64(np.uint64(self.state) + steps)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        # Box-Muller; 1 - u keeps the log argument in (0, 1]
        u1 = 1.0 - self.uniform(n)
        u2 = self.uniform(n)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """Integers in [low, high] inclusive."""
        span = high - low + 1
        return low + (self.u64(n) % np.uint64(span)).astype(np.int64)

    def integer(self, low: int, high: int) -> int:
        return int(self.integers(low, high, 1)[0])

    def scalar(self, low: float = 0.0, high: float = 1.0) -> float:
        return float(self.uniform(1, low, high)[0])
