"""SplitMix64 random streams.

All randomness in the package flows through :class:`SplitMix64` so that a
fixed seed reproduces bit-identical results on every platform, independent
of numpy's generator versions. The generator is counter based, which makes
bulk draws vectorizable: output ``i`` (1-based) of a stream with state ``s``
is ``mix(s + i * GOLDEN)``.
"""
from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 1.0 / (1 << 53)


def splitmix64(x: int) -> int:
    """One SplitMix64 step: advance ``x`` by the golden gamma and mix."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Chain ``splitmix64(seed ^ key)`` over ``keys``.

    ``derive_seed(s, k)`` is the per-class / per-tree stream seed;
    ``derive_seed(s, epoch, index)`` the per-example augmentation seed.
    """
    s = seed & MASK64
    for k in keys:
        s = splitmix64(s ^ (k & MASK64))
    return s


class SplitMix64:
    """A SplitMix64 stream with scalar and vectorized draws."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    @classmethod
    def derived(cls, seed: int, *keys: int) -> "SplitMix64":
        return cls(derive_seed(seed, *keys))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _M1) & MASK64
        z = ((z ^ (z >> 27)) * _M2) & MASK64
        return z ^ (z >> 31)

    def u64(self, n: int) -> np.ndarray:
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            out = _mix_array(z)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def random(self, n: int | None = None):
        """Uniform draws on [0, 1) with 53 bits of resolution."""
        if n is None:
            return (self.next_u64() >> 11) * _INV53
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * _INV53

    def uniform(self, low: float, high: float, n: int | None = None):
        u = self.random(n)
        return low + (high - low) * u

    def below(self, bound: int, n: int | None = None):
        """Integers in ``[0, bound)``."""
        if bound < 1:
            raise ValueError("bound must be >= 1")
        if n is None:
            return min(int(self.random() * bound), bound - 1)
        idx = np.floor(self.random(n) * bound).astype(np.int64)
        return np.minimum(idx, bound - 1)

    def normal(self, n: int, scale: float = 1.0) -> np.ndarray:
        """Box-Muller normals, two uniforms per output."""
        u = self.random(2 * n)
        u1, u2 = u[0::2], u[1::2]
        return scale * np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, drawing from the top index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> np.ndarray:
        order = list(range(n))
        self.shuffle(order)
        return np.asarray(order, dtype=np.int64)

    def sample(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)`` by partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError("need 0 <= k <= n")
        pool = np.arange(n, dtype=np.int64)
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()
