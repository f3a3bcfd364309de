"""Labeled seed derivation.

Every random draw in a run is keyed by a root seed plus a tuple of labels
(phase, repetition, unit id, ...), so a partial re-run draws exactly what the
full run drew for the same units.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(root: int, *labels: object) -> int:
    """Return a 64-bit seed determined by ``root`` and ``labels``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root) & _MASK64).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def rng_for(root: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))


def text_hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def splitmix64(x: int) -> int:
    """One round of the splitmix64 finalizer on a Python int."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)
