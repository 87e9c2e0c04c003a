"""Seeded random streams.

All randomness goes through numpy's Philox-4x64 counter-based generator.
A stream is keyed by a tuple of non-negative integers (for example
``(seed, round, tree)``), hashed by ``SeedSequence``; two keys that differ in
any position yield statistically independent streams, so work can be
scheduled in any order without changing results.
"""

import numpy as np

# Stream-domain tags keep different consumers of the same user seed apart.
SPLIT_GOOD = 11
SPLIT_BAD = 12
TREE = 21
DEFECT = 31
SYNTHETIC = 41


def stream(*key: int) -> np.random.Generator:
    if any(int(k) < 0 for k in key):
        raise ValueError(f"stream key entries must be non-negative, got {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))
