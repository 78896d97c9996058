"""Seeded random streams.

All randomness flows through numpy's Philox counter-based generator,
keyed by (user seed, stream id, substream id). Named streams keep task
sampling, data sampling, parameter init, and evaluation independent of
one another, so acceptance numbers are reproducible from the seed alone.
"""

import numpy as np

STREAM_INIT = 0
STREAM_TASK = 1
STREAM_DATA = 2
STREAM_EVAL = 3

_MASK = (1 << 64) - 1


def stream_rng(seed, stream, sub=0):
    """Generator for the given (seed, stream, substream) triple."""
    key = np.array(
        [int(seed) & _MASK, ((int(stream) << 32) | (int(sub) & 0xFFFFFFFF)) & _MASK],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))
