"""
Seed derivation for reproducible parallel work
"""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

SeedKey = Union[int, str]


def _as_word(key: SeedKey) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) % 2**64


def derive_seed(*keys: SeedKey) -> int:
    """
    Hash a tuple of keys (master seed, replication index, stream name, ...) into a 63-bit seed.

    Every parallel task gets its seed from here before it starts, so results do
    not depend on scheduling or worker count.
    """
    seq = np.random.SeedSequence([_as_word(k) for k in keys])
    hi, lo = seq.generate_state(2, dtype=np.uint32)
    return int((int(hi) << 32 | int(lo)) & (2**63 - 1))
