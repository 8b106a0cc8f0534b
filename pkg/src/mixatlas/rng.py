"""Counter-based random substreams.

Every random draw in the estimator comes from a Philox generator keyed by a
master seed plus a tuple of counters (iteration, image, role, component).
Draws therefore depend only on *which* chain consumes them, never on the
order in which chains are scheduled.
"""
from __future__ import annotations

import os

import numpy as np

SEED_ENV = "MIXATLAS_SEED"
DEFAULT_SEED = 20090515

# stream roles
AUX = 0
LABEL = 1
BETA = 2
INIT = 3
SYNTH = 4
SAMPLE = 5


def default_seed() -> int:
    value = os.environ.get(SEED_ENV)
    return DEFAULT_SEED if value in (None, "") else int(value)


class CounterRNG:
    """Factory of independent generators addressed by integer counters."""

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)

    def generator(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"CounterRNG(seed={self.seed})"
