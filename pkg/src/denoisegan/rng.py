"""Portable random streams.

The generator is SplitMix64 (Steele, Lea & Flood 2014): the k-th output of a
stream with state ``s`` is ``mix(s + k * 0x9E3779B97F4A7C15)`` where ``mix`` is
the published finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

all arithmetic modulo 2**64. Because outputs only depend on the counter, whole
blocks are drawn at once with numpy uint64 arithmetic.

Uniforms take the top 53 bits: ``u = (x >> 11) * 2**-53`` in [0, 1).
Gaussians use Box-Muller on consecutive pairs (u1, u2)::

    r = sqrt(-2 ln(1 - u1));  z0 = r cos(2 pi u2);  z1 = r sin(2 pi u2)

emitted in the order z0, z1. An odd request discards the last z1.

Derived seeds: ``derive(seed, k1, k2, ...)`` folds each key in with
``s = mix(s ^ mix(k + GOLDEN))``; dataset scene ``i`` uses ``derive(master, i)``.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def derive(seed: int, *keys: int) -> int:
    s = seed & _MASK
    for k in keys:
        s = mix64(s ^ mix64((int(k) + GOLDEN) & _MASK))
    return s


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 stream; ``counter`` counts 64-bit words consumed."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed:#x}, counter={self.counter})"

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * np.uint64(GOLDEN)
            return _mix_array(z)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal draws (float64)."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, low: int, high: int, n: int | None = None):
        """Uniform ints in [low, high); a single int when ``n`` is None."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty range [{low}, {high})")
        vals = low + np.floor(self.uniform(1 if n is None else n) * span).astype(np.int64)
        return int(vals[0]) if n is None else vals

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def spawn(self, *keys: int) -> "Rng":
        return Rng(derive(self.seed, *keys))
