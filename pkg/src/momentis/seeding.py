"""Deterministic RNG derivation.

All randomness flows through numpy Generators seeded from an integer master
seed plus an index path, so replications, panels and MCMC iterations get
independent, reproducible streams without any global state.
"""

import numpy as np


def derived_rng(master_seed, *path):
    """Generator seeded from ``master_seed`` and an integer index path.

    ``derived_rng(seed, rep)`` and ``derived_rng(seed, rep, panel)`` give
    streams that are independent of each other and stable across runs.
    """
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, path)]))


def derived_seed(master_seed, *path):
    """Integer sub-seed derived from a master seed and index path."""
    ss = np.random.SeedSequence([int(master_seed), *map(int, path)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
