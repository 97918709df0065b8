"""Deterministic RNG substreams.

Every source of randomness in a run is a named substream of one root seed.
Branch-tagged streams matter: the stable branch of a late-fusion model must
consume exactly the draws a standalone stable model would, so that a run
whose adaptive branch is excluded every step is bitwise identical to the
standalone run under the same seed.
"""

from __future__ import annotations

import numpy as np

# purpose tags
GRAPH = 0
SPLIT = 1
FOLDS = 2
INIT = 3
DROPOUT = 4

# branch tags
HET = 1
STAB = 2
FUSED = 3


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))
