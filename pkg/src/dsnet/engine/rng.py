"""Deterministic SplitMix64 stream used for dropout, augmentation and init.

Output ``i`` (1-based, counting every value ever drawn from the state) is
``mix(seed + i * 0x9E3779B97F4A7C15 mod 2**64)`` with the standard SplitMix64
finalizer. Because the stream is counter based, drawing ``n`` values in one
vectorized call is identical to drawing them one at a time.
"""

from __future__ import annotations

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class RngState:
    def __init__(self, seed: int = 0, counter: int = 0):
        if not 0 <= int(seed) <= _MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, counter={self.counter})"

    def copy(self) -> "RngState":
        return RngState(self.seed, self.counter)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(GOLDEN_GAMMA)
            out = _mix(z)
        self.counter += n
        return out

    def uniform(self, shape) -> np.ndarray:
        """float64 samples in [0, 1) with 53 random bits each."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def integers(self, low: int, high: int) -> int:
        """One integer uniform on the closed range [low, high]."""
        if high < low:
            raise ValueError("empty integer range")
        span = high - low + 1
        return low + min(int(self.uniform(1)[0] * span), span - 1)

    def normal(self, shape) -> np.ndarray:
        """Standard normal samples via Box-Muller on pairs of uniforms."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1]
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
