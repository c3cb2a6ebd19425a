"""Seed plumbing: accept either integers or spawned SeedSequences."""

import numpy as np


def seed_seq(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def rng_from(seed):
    return np.random.default_rng(seed_seq(seed))
