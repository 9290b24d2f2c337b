"""Seed derivation and small shared helpers.

Every random decision in the library flows through a Generator seeded by
``derive_seed``, which hashes a base seed plus a path of string/int tags.
The derivation is stable across platforms, numpy versions and process
scheduling, which is what makes whole runs byte-reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(base: int, *path: object) -> int:
    """Fold (base, path...) into a 63-bit seed via blake2b."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little") & 0x7FFFFFFFFFFFFFFF


def rng_for(base: int, *path: object) -> np.random.Generator:
    """Deterministic Generator for a derivation path."""
    return np.random.Generator(np.random.PCG64(derive_seed(base, *path)))


def fingerprint_bytes(*chunks: bytes) -> str:
    """Short stable hex digest of a byte sequence."""
    h = hashlib.blake2b(digest_size=12)
    for c in chunks:
        h.update(c)
    return h.hexdigest()
