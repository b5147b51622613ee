"""Dense float64 array helpers and a frozen, counter-based random generator.

Values throughout the package are plain C-order numpy float64 arrays.
Shape checks are strict (no broadcasting beyond scalar-vs-array) so
dimension bugs surface at the call site.
"""

from __future__ import annotations

import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MULT1 = np.uint64(0xBF58476D1CE4E5B9)
_MULT2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = 0xFFFFFFFFFFFFFFFF
_INV_2_53 = 2.0 ** -53


def _finalize(state: np.ndarray) -> np.ndarray:
    """SplitMix64 output function, vectorized over uint64 arrays."""
    z = state.copy()
    with np.errstate(over="ignore"):
        z ^= z >> np.uint64(30)
        z *= _MULT1
        z ^= z >> np.uint64(27)
        z *= _MULT2
        z ^= z >> np.uint64(31)
    return z


class Rng:
    """Deterministic counter-based random stream (SplitMix64).

    Raw draw ``i`` (zero-based over the lifetime of the generator) is
    ``finalize(seed + (i + 1) * 0x9E3779B97F4A7C15)`` with all integer
    arithmetic modulo 2**64.  This algorithm is frozen: the integer
    stream is bit-identical on every platform, which is what makes
    trained models and audit reports reproducible.  The generator is
    single-owner mutable state; hand it off, never share it.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed <= _U64_MASK:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self._seed = np.uint64(seed)
        self._count = 0

    @property
    def seed(self) -> int:
        return int(self._seed)

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` uint64 draws from the stream."""
        if n < 0:
            raise ValueError(f"draw count must be non-negative, got {n}")
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            state = self._seed + idx * _GOLDEN
        return _finalize(state)

    def uniform(self, shape=()) -> np.ndarray:
        """i.i.d. samples from U[0, 1) with 53-bit resolution."""
        shape = _as_shape(shape)
        n = math.prod(shape)
        out = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return out.reshape(shape)

    def gaussian(self, shape, sigma: float) -> np.ndarray:
        """i.i.d. samples from N(0, sigma^2) via Box-Muller.

        sigma = 0 returns exact zeros without consuming the stream.
        """
        if sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {sigma}")
        shape = _as_shape(shape)
        n = math.prod(shape)
        if n == 0 or sigma == 0:
            return np.zeros(shape)
        pairs = (n + 1) // 2
        r = self.raw(2 * pairs)
        # u1 in (0, 1] keeps the log finite; u2 in [0, 1).
        u1 = ((r[:pairs] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _INV_2_53
        u2 = (r[pairs:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = (2.0 * np.pi) * u2
        out = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return (out * sigma).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic random permutation of range(n)."""
        return np.argsort(self.raw(n), kind="stable")

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream addressed by ``tag`` (frozen derivation)."""
        with np.errstate(over="ignore"):
            mixed = _finalize(np.array([self._seed ^ (np.uint64(tag) + np.uint64(1)) * _GOLDEN],
                                       dtype=np.uint64))[0]
        return Rng(int(mixed))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Strict 2-D matrix product."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def gaussian(rng: Rng, shape, sigma: float) -> np.ndarray:
    """Tensor of N(0, sigma^2) samples drawn from ``rng``."""
    return rng.gaussian(shape, sigma)


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)
