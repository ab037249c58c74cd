"""Seeded random streams.

All randomness goes through :func:`make_rng`, which builds a PCG64 generator
from a ``SeedSequence`` keyed by ``(seed, *keys)``.  Distinct keys give
statistically independent streams, so callers never share a generator
between unrelated purposes.
"""

import numpy as np

# Stream keys. Keep these stable: changing one changes every output.
STREAM_BLOBS = 1
STREAM_RINGS = 2
STREAM_IMAGE = 3
STREAM_LABEL_NOISE = 10
STREAM_VIEWS = 11
STREAM_INIT = 20
STREAM_SHUFFLE = 21
STREAM_MIXUP = 22
STREAM_FIELD_INIT = 30
STREAM_FIELD_BATCH = 31


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence([seed, *[int(k) for k in keys]])
    return np.random.Generator(np.random.PCG64(ss))
