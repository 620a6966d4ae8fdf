"""
Seeded random generators.

All sampling goes through NumPy's counter-based Philox-4x64 bit generator.
A generator is keyed by ``(seed, *keys)`` through ``SeedSequence`` so that
independent concerns (stream, pretraining, calibration...) draw from
non-overlapping streams and stay reproducible when one of them changes.
"""

from enum import IntEnum

import numpy as np


class RngPurpose(IntEnum):
    STREAM = 0
    PRETRAIN = 1
    CALIBRATION = 2
    INIT = 3
    COMPARATOR = 4
    THEORY = 5
    DETECTION = 6


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator for the entropy tuple ``(seed, *keys)``."""
    entropy = [int(seed), *(int(k) for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
