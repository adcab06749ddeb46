"""Named deterministic random substreams.

All randomness in the toolkit flows from a single master seed. Each
consumer asks for a labelled substream so that, e.g., disturbance draws
do not shift when the input-signal generator changes how many numbers it
consumes.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(master_seed: int, label: str) -> np.random.Generator:
    """Return a Generator keyed by (master_seed, label), stable across runs."""
    tag = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence((int(master_seed), tag)))
