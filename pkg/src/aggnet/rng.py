"""SplitMix64 counter-based generator.

Output i of a stream is ``mix(seed + (i + 1) * GOLDEN)``, so streams are a
pure function of (seed, counter) and reproducible in any language with
wrapping 64-bit integer arithmetic.
"""
from __future__ import annotations

import hashlib

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def mix64(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(*parts):
    """Stable 64-bit seed from arbitrary printable parts (e.g. seed, split, index)."""
    text = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


class SplitMix64:
    def __init__(self, seed):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def spawn(self, *parts):
        return SplitMix64(derive_seed(self.seed, *parts))

    def next_u64(self, size=None):
        n = 1 if size is None else int(np.prod(size, dtype=np.int64))
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * GOLDEN
        out = mix64(z)
        return out[0] if size is None else out.reshape(size)

    def random(self, size=None):
        """Uniform doubles in [0, 1) from the top 53 bits."""
        u = self.next_u64(size)
        return (np.asarray(u) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def integers(self, low, high, size=None):
        """Integers in [low, high)."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty range [{low}, {high})")
        u = self.random(size)
        return (low + np.floor(u * span)).astype(np.int64)

    def normal(self, size=None):
        """Standard normals via Box-Muller."""
        n = 1 if size is None else int(np.prod(size, dtype=np.int64))
        u1 = 1.0 - self.random(n)  # (0, 1]
        u2 = self.random(n)
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z[0] if size is None else z.reshape(size)

    def permutation(self, n):
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def get_state(self):
        return {"seed": self.seed, "counter": self.counter}

    def set_state(self, state):
        self.seed = int(state["seed"])
        self.counter = int(state["counter"])
