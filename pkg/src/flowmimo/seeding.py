"""Deterministic RNG plumbing built on numpy SeedSequence splitting."""

from __future__ import annotations

import numpy as np


def as_rng(seed) -> np.random.Generator:
    """Coerce an int seed (or pass through a Generator) into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def split_rng(master_seed: int, *key) -> np.random.Generator:
    """Counter-based split: independent stream addressed by an integer path.

    The same (master_seed, key) always yields the same stream, independent
    of how many other streams were drawn, so any trial is reproducible in
    isolation.
    """
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key)))
