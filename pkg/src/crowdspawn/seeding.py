"""Derived random streams.

Every consumer of randomness asks for a generator keyed by a master seed and a
short path of integers or names, so independent consumers never share a stream
and changing one of them leaves the others untouched.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def derive_seed(master: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=tuple(_key(p) for p in path))


def derive_rng(master: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))


def derive_int(master: int, *path) -> int:
    return int(derive_seed(master, *path).generate_state(1, dtype=np.uint32)[0])
