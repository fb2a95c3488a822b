"""Keyed, independent random streams.

Every consumer of randomness asks for a stream by (seed, purpose, index...),
so table construction, encounter sampling, splits and model init never share
state and results do not depend on call order.
"""
import zlib

import numpy as np


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, tag, *index)``."""
    key = [int(seed), tag_id(tag), *(int(i) for i in index)]
    if any(k < 0 for k in key):
        raise ValueError(f"stream key entries must be non-negative: {key}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def derive_seed(seed: int, tag: str, *index: int) -> int:
    """A 63-bit seed for a sub-task, derived from a master seed."""
    return int(stream(seed, tag, *index).integers(0, 2**63 - 1))
