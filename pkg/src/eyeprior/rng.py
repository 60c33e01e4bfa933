"""Deterministic, schedule-independent random streams.

All randomness is drawn from generators keyed by (seed, *path) where the
path names the consumer, e.g. ``stream(seed, "pretrain", iteration)`` or
``stream(seed, "augment", epoch, index)``.  Streams never depend on draw
order elsewhere in the program, so results are reproducible regardless of
worker count or call interleaving.
"""

from __future__ import annotations

import zlib

import numpy as np


def _path_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream path ints must be nonnegative, got {part}")
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"stream path parts must be int or str, got {type(part)!r}")


def stream(seed: int, *path) -> np.random.Generator:
    """Return a Generator uniquely keyed by (seed, *path)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_path_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))
