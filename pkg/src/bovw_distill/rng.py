"""Hierarchical, name-keyed random streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def rng_for(seed: int, *path) -> np.random.Generator:
    """Independent generator for ``path`` under ``seed``.

    Streams depend only on (seed, path), so adding or toggling one component
    never shifts the draws another component sees.
    """
    entropy = [int(seed) & 0xFFFFFFFF, *(_key(p) for p in path)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
