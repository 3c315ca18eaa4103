"""Named, seed-derived random streams.

Every random draw in the package goes through :func:`stream`, so a single
integer seed fans out into independent, order-insensitive generators.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` and a path of names/ints.

    ``stream(7, "synth", "video", 3)`` always yields the same sequence,
    regardless of which other streams were consumed before it.
    """
    seed = int(seed)
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF]
    ss = np.random.SeedSequence(entropy, spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))
