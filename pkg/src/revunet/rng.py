"""Deterministic RNG stream derivation.

All randomness in the package flows from one explicit integer seed per
entry point. Sub-streams are derived by hashing string labels into a
numpy SeedSequence, so e.g. parameter init, phantom generation and
augmentation draw from independent, reproducible streams.
"""

import zlib

import numpy as np


def rng_for(seed: int, *labels) -> np.random.Generator:
    """Generator for (seed, labels); same arguments always give the same stream."""
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        if isinstance(label, str):
            keys.append(zlib.crc32(label.encode("utf-8")))
        else:
            keys.append(int(label) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))
