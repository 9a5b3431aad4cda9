"""Deterministic RNG stream derivation.

Every stochastic stage derives its generator from (master seed, stage, index...)
so that results are bit-reproducible regardless of execution order or worker
count. Stage tags are fixed integers, never hashes.
"""

from __future__ import annotations

import numpy as np

STAGE_SYNTH = 1
STAGE_IMPUTE = 2
STAGE_BOOTSTRAP = 3
STAGE_REPLICATE = 4
STAGE_VALIDATION = 5
STAGE_EXTERNAL = 6
STAGE_BETA_SYN = 7


def child_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by (master_seed, *key)."""
    return np.random.default_rng(np.random.SeedSequence((int(master_seed), *map(int, key))))
