"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(master_seed, purpose, *counters)``.  A stream is a pure function of its
key, so the result of a draw never depends on call order or on which other
streams were consumed first.
"""

from __future__ import annotations

import enum

import numpy as np


class Purpose(enum.IntEnum):
    TRANSFORM = 1
    DOM = 2
    SHUFFLE = 3
    INIT = 4
    PERTURB = 5
    SUBSET = 6


def stream(master_seed: int, purpose: Purpose | int, *counters: int) -> np.random.Generator:
    """Return an independent generator for the given key."""
    if master_seed < 0 or any(c < 0 for c in counters):
        raise ValueError("seeds and counters must be non-negative")
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(purpose), *map(int, counters)))
    return np.random.Generator(np.random.Philox(seq))
