"""Hierarchical seed derivation.

Every random draw in fedmem comes from a generator seeded by
``derive_seed(parent, *path)``. The child seed is the first 8 bytes of
BLAKE2b over the parent seed and the path components, so a child depends
only on its path and never on how many draws happened elsewhere. This is
what lets per-client work run in any order (or in parallel) without
changing results.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(parent: int, *path: int | str) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(int(parent & _MASK64).to_bytes(8, "little"))
    for part in path:
        if isinstance(part, str):
            h.update(b"s")
            h.update(part.encode())
        else:
            h.update(b"i")
            h.update(int(part).to_bytes(8, "little", signed=True))
        h.update(b"/")
    return int.from_bytes(h.digest(), "little")


def rng_for(parent: int, *path: int | str) -> np.random.Generator:
    """A numpy Generator seeded from the derived child seed."""
    return np.random.default_rng(derive_seed(parent, *path))
