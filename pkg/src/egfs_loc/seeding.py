"""Named random streams derived from one run seed.

Each component draws from its own stream so that toggling one part of the
pipeline never shifts the random numbers seen by another.
"""
import zlib

import numpy as np

STREAMS = ("scene", "train", "ransac", "buffer")


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), key]))
