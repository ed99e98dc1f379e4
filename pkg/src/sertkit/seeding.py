"""Named, independent random streams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for sub-stream ``name`` of ``seed``.

    The same (seed, name) always yields the same sequence, and distinct
    names are statistically independent.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
