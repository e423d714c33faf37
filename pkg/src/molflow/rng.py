"""Named, counter-based random streams derived from one run seed.

``stream(seed, "sample", 17)`` always yields the same Philox generator, no
matter how many other streams were drawn before it, which keeps per-molecule
sampling reproducible and independent of batch order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_key(name), *map(int, index)))
    return np.random.Generator(np.random.Philox(ss))
