"""Portable counter-based random numbers (SplitMix64).

All stochastic inputs in this package (initial fields, forcings, test
sampling) are drawn through this generator so that a seed reproduces the
same scenario bit-for-bit on one platform, independent of numpy's own
generator versioning.

Reference constants (Steele, Lea, Flood, SPLITMIX64):
    gamma = 0x9E3779B97F4A7C15
    mix   = z ^= z>>30; z *= 0xBF58476D1CE4E5B9; z ^= z>>27;
            z *= 0x94D049BB133111EB; z ^= z>>31
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based SplitMix64 stream; `draw` methods advance the counter."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def _raw(self, count: int) -> np.ndarray:
        idx = np.arange(self._counter, self._counter + count, dtype=np.uint64)
        self._counter += count
        with np.errstate(over="ignore"):
            return _mix(self._seed + (idx + np.uint64(1)) * _GAMMA)

    def uniform(self, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        """Uniform doubles in [0, 1) from the top 53 bits."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape)) if shape else 1
        with np.errstate(over="ignore"):
            bits = self._raw(count) >> np.uint64(11)
        vals = bits.astype(np.float64) * (2.0 ** -53)
        return vals.reshape(shape) if shape else float(vals[0])

    def normal(self, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape)) if shape else 1
        pairs = (count + 1) // 2
        u1 = self.uniform((pairs,))
        u2 = self.uniform((pairs,))
        r = np.sqrt(-2.0 * np.log1p(-u1))  # log1p avoids log(0)
        out = np.concatenate([r * np.cos(2.0 * np.pi * u2),
                              r * np.sin(2.0 * np.pi * u2)])[:count]
        return out.reshape(shape) if shape else float(out[0])

    def integers(self, low: int, high: int, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        """Integers in [low, high) by rejection-free modular reduction."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        count = int(np.prod(shape)) if shape else 1
        span = np.uint64(high - low)
        vals = (self._raw(count) % span).astype(np.int64) + low
        return vals.reshape(shape) if shape else int(vals[0])
