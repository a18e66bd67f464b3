"""Reproducible random streams from a single 64-bit seed."""

import zlib

import numpy as np


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a named stream."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode())]
    return np.random.Generator(np.random.Philox(key=key))
