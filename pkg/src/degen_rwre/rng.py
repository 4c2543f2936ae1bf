"""Counter-based seed derivation.

Every random stream is addressed by ``(master seed, stream tag, index)`` so a
result never depends on how work is split across workers.
"""

import numpy as np

TAGS = {
    "edge": 1,
    "path": 2,
    "dual": 3,
    "block": 4,
    "bootstrap": 5,
    "sample": 6,
    "misc": 7,
}


def _entropy(seed, tag, index):
    if isinstance(tag, str):
        tag = TAGS[tag]
    return np.random.SeedSequence(int(seed), spawn_key=(int(tag), int(index)))


def generator(seed, tag, index=0):
    """Philox-backed ``numpy.random.Generator`` for one stream."""
    return np.random.Generator(np.random.Philox(_entropy(seed, tag, index)))


def stream_seeds(seed, tag, indices):
    """uint32 seeds for compiled kernels, one per index."""
    out = np.empty(len(indices), dtype=np.int64)
    for k, i in enumerate(indices):
        out[k] = int(_entropy(seed, tag, i).generate_state(1, dtype=np.uint32)[0])
    return out
