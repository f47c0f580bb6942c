"""Counter-based random streams.

Every random draw in the simulator comes from a stream keyed by
``(master_seed, purpose, *counters)``. Two runs that ask for the same key get
the same numbers no matter what else they did before, which is what lets
twin runs on neighbouring federations share their randomness exactly.
"""

import numpy as np

PURPOSES = {
    "init": 0,
    "select": 1,
    "batch": 2,
    "data": 3,
    "partition": 4,
    "perturb": 5,
    "probe": 6,
    "constants": 7,
    "bootstrap": 8,
    "position": 9,
}


def stream(seed, purpose, *counters):
    """Philox generator for one (seed, purpose, counters) key."""
    if purpose not in PURPOSES:
        raise KeyError(f"unknown rng purpose {purpose!r}")
    key = [int(seed), PURPOSES[purpose], *(int(c) for c in counters)]
    if any(k < 0 for k in key):
        raise ValueError(f"rng key entries must be non-negative, got {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
