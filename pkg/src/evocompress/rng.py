"""
Seed handling.

All randomness flows through numpy ``Generator`` objects whose seeds are
derived with a splitmix64 mixer, so that a (seed, key) pair gives the same
stream on every platform.
"""

import hashlib
from typing import Union

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    """One splitmix64 step: returns the mixed 64-bit output for ``state``."""
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, key: Union[str, int] = 0) -> int:
    """
    Derive a child seed from a parent seed and a key.

    String keys are hashed with SHA-256 first; the result is mixed with the
    parent seed through two splitmix64 rounds.

    Examples
    --------
    >>> derive_seed(42, "Pr - Tr") == derive_seed(42, "Pr - Tr")
    True
    """
    if isinstance(key, str):
        key_int = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
    else:
        key_int = int(key) & _MASK64
    return splitmix64(splitmix64(int(seed) & _MASK64) ^ key_int)


def make_rng(seed: int, key: Union[str, int] = 0) -> np.random.Generator:
    """Return a PCG64 generator seeded from ``derive_seed(seed, key)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, key)))
