"""Seedable, stream-indexed random number generation.

Every stochastic consumer (data sampling, dropout masks, noise, mixing
coefficients, initialisation) draws from its own stream, derived from
``(seed, tag, step)``.  That keeps runs reproducible and lets a resumed
training run replay exactly the draws an uninterrupted run would make.

The bit generator is numpy's PCG64, whose output is specified bit-for-bit
and therefore identical across platforms.  Gaussian draws use the
Box-Muller transform on top of the uniform stream so the mapping from bits
to normals is fixed by this module rather than by numpy internals.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_key(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag & 0xFFFFFFFF
    return zlib.crc32(tag.encode("utf-8"))


class Rng:
    """Deterministic 64-bit generator.

    Parameters
    ----------
    seed : int
        Any integer; reduced modulo 2**64.
    stream : tuple of int, optional
        Extra words mixed into the seed.  Use :meth:`derive` instead of
        passing this directly.
    """

    def __init__(self, seed: int = 0, stream: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, *self.stream])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def derive(self, tag: str | int, step: int = 0) -> "Rng":
        """Independent child stream keyed by a purpose tag and a step index."""
        return Rng(self.seed, self.stream + (_tag_key(tag), int(step) & 0xFFFFFFFF, int(step) >> 32))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        """Uniform draws in ``[low, high)``."""
        u = self._gen.random(shape)
        out = low + (high - low) * u
        # float32 rounding can land exactly on `high`
        out = np.asarray(out, dtype=dtype)
        if high > low:
            np.minimum(out, np.nextafter(dtype(high), dtype(low)), out=out)
        return out

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        """Gaussian draws via Box-Muller."""
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        half = (n + 1) // 2
        u1 = self._gen.random(half)
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * half)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return np.asarray(mean + std * z[:n].reshape(shape), dtype=dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=shape)

    def bernoulli(self, p: float, shape) -> np.ndarray:
        """Boolean mask, True with probability ``p``."""
        return self._gen.random(shape) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"
