"""Labeled derivation of random streams from a single root seed.

Every random decision in a run (data generation, client sampling, each
client's training stream, evaluation sampling) draws from its own
generator derived from ``(root_seed, purpose, *indices)``.  Streams are
therefore independent of execution order, which is what makes parallel
client execution and resumed runs bit-reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed_sequence(seed: int, *labels: int | str) -> np.random.SeedSequence:
    """Build a SeedSequence from a root seed and a label path.

    String labels are folded in via crc32 so purposes like "client" and
    "eval" occupy disjoint stream families; integer labels (round index,
    client id) are used as-is.
    """
    entropy = [int(seed) & _MASK64]
    for label in labels:
        if isinstance(label, str):
            entropy.append(zlib.crc32(label.encode("utf-8")))
        else:
            entropy.append(int(label) & _MASK64)
    return np.random.SeedSequence(entropy)


def derive_rng(seed: int, *labels: int | str) -> np.random.Generator:
    """Generator for the stream labeled ``(seed, *labels)``."""
    return np.random.default_rng(derive_seed_sequence(seed, *labels))


def as_rng(rng_or_seed: np.random.Generator | int) -> np.random.Generator:
    """Accept either a ready Generator or a plain integer seed."""
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return np.random.default_rng(int(rng_or_seed))
