"""Portable counter-based random numbers (SplitMix64).

Every random draw in the package goes through this generator so that a
seed reproduces the same bits on any platform and in any implementation
that follows the same recipe:

    z_i = seed + (i + 1) * 0x9E3779B97F4A7C15          (mod 2**64)
    z_i = (z_i ^ (z_i >> 30)) * 0xBF58476D1CE4E5B9
    z_i = (z_i ^ (z_i >> 27)) * 0x94D049BB133111EB
    out = z_i ^ (z_i >> 31)

where ``i`` is a running counter. Uniform doubles take the top 53 bits,
normals use Box-Muller on pairs of uniforms, permutations are a stable
argsort of fresh 64-bit keys.
"""

from __future__ import annotations

import hashlib

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int | str) -> int:
    """Fold ``keys`` into ``seed`` to get an independent stream seed.

    Each step is ``s = mix(mix(s + GOLDEN) ^ key + GOLDEN)``.
    String keys are hashed with SHA-256 (first 8 bytes, little-endian).
    """
    s = int(seed) & _MASK
    for key in keys:
        if isinstance(key, str):
            k = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
        else:
            k = int(key) & _MASK
        with np.errstate(over="ignore"):
            z = _mix(np.array([s], dtype=np.uint64) + GOLDEN) ^ np.uint64(k)
            s = int(_mix(z + GOLDEN)[0])
    return s


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * GOLDEN
            return _mix(z)

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """``n`` doubles in ``[lo, hi)``."""
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + (hi - lo) * u

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1], keeps log finite
        u2 = u[m:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return mean + std * z[:n]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")
