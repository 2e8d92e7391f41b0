"""Counter-based random streams.

Every random number in the package comes from a Philox generator keyed by a
``SeedSequence`` whose spawn key encodes *where* the numbers are used
(trajectory index, channel index, scan index ...).  Streams never depend on
how work is scheduled, so results are identical for any worker count.
"""

from __future__ import annotations

import numpy as np


def derive_seed(base_seed: int, *index: int) -> int:
    """64-bit child seed for position ``index`` under ``base_seed``."""
    ss = np.random.SeedSequence(int(base_seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(i) for i in index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
