"""Counter-based expansion of one root seed into stable sub-seeds.

``derive_seed(root, *keys)`` feeds ``root`` as entropy and the integer keys as
the spawn key of :class:`numpy.random.SeedSequence`, then reads two 32-bit
words as one 64-bit seed. SeedSequence hashing is platform independent, so
sub-seeds are identical on every machine.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("seed keys must be non-negative")
        return int(k)
    # strings get a stable CRC, never Python's salted hash()
    return zlib.crc32(str(k).encode("utf-8"))


def derive_seed(root: int, *keys) -> int:
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(_key(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


def rng_for(root: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
