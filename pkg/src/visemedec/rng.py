"""Seed-stream helpers.

Every stochastic component pulls its own generator from a single root seed
via SeedSequence so that runs are reproducible and streams do not alias
across components (train batches vs. mask draws vs. data generation).
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_entropy(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    # strings hash via crc32 so stream identity is stable across runs/platforms
    return zlib.crc32(str(tag).encode("utf-8"))


def substream(seed: int, *tags) -> np.random.Generator:
    """Generator for the stream identified by (seed, *tags)."""
    entropy = [int(seed)] + [_tag_entropy(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
