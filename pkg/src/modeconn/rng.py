"""Seeded random streams.

Every stochastic component draws from a named substream of one experiment
seed, so any stage can be rerun in isolation and reproduce exactly.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator for the named substream of ``seed``.

    The stream depends only on (seed, name); distinct names give
    statistically independent streams.
    """
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag]))
