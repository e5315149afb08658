"""Counter-based random streams.

Every stochastic component draws from a Philox generator keyed by a small
integer tuple (seed, stream tag, indices...). Streams are independent of
evaluation order, so frames, epochs, and workers can be processed in any
order or in parallel and still reproduce bit-identically.
"""

from __future__ import annotations

import numpy as np

# stream tags; keep stable, they are part of the on-disk reproducibility story
STREAM_SCAN = 1
STREAM_FREE_SPACE = 2
STREAM_INIT = 3
STREAM_SHUFFLE = 4


def keyed_rng(*key: int) -> np.random.Generator:
    """Generator for a fixed integer key. Same key, same stream, always."""
    k = np.array(key, dtype=np.uint64)
    # Philox takes a 2-word key; fold longer keys with a splitmix-style hash
    folded = np.uint64(0x9E3779B97F4A7C15)
    for w in k:
        folded = np.uint64((int(folded) ^ int(w)) * 0xBF58476D1CE4E5B9 % (1 << 64))
    return np.random.Generator(np.random.Philox(key=[int(folded), len(key)]))
