"""Named, independent RNG substreams derived from one run seed.

Every consumer of randomness gets its own stream so that disabling one
feature (say, expert-set sampling) never shifts the draws seen by
another (say, student decoding) — several reproducibility checks rely
on that isolation.
"""

from __future__ import annotations

import numpy as np

_STREAMS = {
    "dataset": 0,
    "init_teacher": 1,
    "init_student": 2,
    "data_order": 3,
    "sampling": 4,
    "ka": 5,
    "noise": 6,
    "eval": 7,
}


def substream(seed: int, name: str) -> np.random.Generator:
    try:
        key = _STREAMS[name]
    except KeyError:
        raise KeyError(f"unknown stream {name!r}; known: {sorted(_STREAMS)}") from None
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))
