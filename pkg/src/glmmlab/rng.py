"""Replication-keyed random number streams.

Every simulation replication owns a Philox4x64-10 counter-based generator
(constants documented in the numpy reference) keyed directly by
``(base_seed, replication_index)``.  The key is a pure function of those
two integers only, never of cluster size or fitted family, which is what
makes common random numbers across compared arms work: the same
(base_seed, replication) always reproduces the same draws.
"""

from __future__ import annotations

import numpy as np

__all__ = ["replication_rng"]


def replication_rng(base_seed: int, replication: int) -> np.random.Generator:
    """Generator for one replication; streams never collide across keys."""
    if base_seed < 0 or replication < 0:
        raise ValueError("base_seed and replication must be non-negative integers")
    key = np.array([base_seed, replication], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
