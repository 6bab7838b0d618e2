"""Named random substreams derived from one user seed.

Every consumer asks for ``generator(seed, name, *index)``; the stream is a
``SeedSequence`` keyed by the seed, a fixed stream number and optional
indices (e.g. the tilt index), so streams never collide and results do not
depend on execution order.
"""

import numpy as np

STREAMS = {
    "placement": 1,  # particle counts, classes, orientations, positions
    "tiltseries": 2,  # per-model defocus, dose and per-tilt shifts
    "detector": 3,  # Poisson counting, one substream per tilt index
    "reference": 4,  # synthetic experimental reference images
}


def generator(seed: int, name: str, *index: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name], *map(int, index)]))
