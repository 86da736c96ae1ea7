"""Seedable, splittable randomness for reproducible pipelines.

Every random draw in this package flows from an explicit 64-bit master seed.
Derived streams are obtained by mixing the master seed with a string label
(e.g. an image id) through fixed integer functions, so the same
(seed, label) pair produces the same stream on any platform, in any order,
from any number of threads.

Derivation rule (referenced by marking manifests):

    stream_seed = splitmix64(splitmix64(master_seed) XOR fnv1a64(label))
"""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF

SEED_RULE = "splitmix64(splitmix64(master_seed) ^ fnv1a64(label))"


def fnv1a64(label: str) -> int:
    """FNV-1a 64-bit hash of the UTF-8 encoding of `label`."""
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def splitmix64(z: int) -> int:
    """One step of the splitmix64 mixing function."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, label: str) -> int:
    """Derive the 64-bit seed of the substream identified by `label`."""
    return splitmix64(splitmix64(master_seed & _MASK64) ^ fnv1a64(label))


def make_rng(seed: int) -> np.random.Generator:
    """A PCG64 generator seeded with a 64-bit integer."""
    return np.random.Generator(np.random.PCG64(seed & _MASK64))
