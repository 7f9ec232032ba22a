"""Deterministic derivation of independent random streams from one root seed.

Every stream is ``np.random.default_rng(SeedSequence([root, purpose, *ids]))``
where ``purpose`` is one of the integer tags below and ``ids`` are
non-negative integers such as (client, task, round). SeedSequence hashing is
platform independent, so a given key always yields the same stream.
"""
from __future__ import annotations

import numpy as np

DATA = 0
INIT = 1
SAMPLE = 2
KB = 3
TRAIN = 4
FISHER = 5


def derive_rng(root: int, purpose: int, *ids: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(root), int(purpose), *map(int, ids)]))
