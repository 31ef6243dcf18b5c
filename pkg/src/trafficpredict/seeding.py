"""Named sub-seeds derived from one run seed."""

import zlib

import numpy as np


def sub_seed(seed, name):
    """Stable 32-bit seed for stream ``name`` of run ``seed``."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]).generate_state(1)[0])


def sub_rng(seed, name):
    return np.random.default_rng(sub_seed(seed, name))
