"""Seeded random-number streams.

Every source of randomness in the package flows from a single integer seed
through named substreams, so that e.g. two training runs that differ only in
their reward mode still see identical scene sequences.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for ``name`` derived from ``seed``."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def derive_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from an existing stream."""
    return int(rng.integers(0, 2**63 - 1))
