"""Seeded random streams.

Every random draw in the package comes from a Philox (counter-based)
generator keyed by the experiment seed plus a stream label, so independent
parts of an experiment never share state and results do not depend on call
order across streams.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: object) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def make_rng(seed: int, *stream: object) -> np.random.Generator:
    """Generator for ``seed`` and an optional stream path, e.g. ``("msg", 3)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_label_key(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
