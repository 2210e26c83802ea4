"""Counter-based seed splitting: one 64-bit seed, independent named streams."""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k)
    return zlib.crc32(str(k).encode())


def stream(seed: int, *keys) -> np.random.Generator:
    """Generator for stream ``keys`` of ``seed``; reproducible and independent per key path."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))
