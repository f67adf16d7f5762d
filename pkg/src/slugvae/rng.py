"""Seed-addressable random streams.

Every draw in the package comes from ``stream(seed, *address)``: a Philox
counter-based generator keyed by the seed and a tuple of integer/string
labels. Two calls with the same address give the same numbers, and no
generator state is shared between call sites.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(label) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    label = int(label)
    if label < 0:
        raise ValueError(f"stream address entries must be non-negative, got {label}")
    return label


def stream(seed: int, *address) -> np.random.Generator:
    """Return an independent generator for ``(seed, *address)``."""
    entropy = [_word(seed)] + [_word(a) for a in address]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform random signs as float64, drawn 64 at a time from raw bits."""
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    n = int(np.prod(shape, dtype=np.int64))
    words = rng.integers(0, np.iinfo(np.uint64).max, size=(n + 63) // 64, dtype=np.uint64, endpoint=True)
    bits = np.unpackbits(words.view(np.uint8))[:n]
    return (1.0 - 2.0 * bits.astype(np.float64)).reshape(shape)
