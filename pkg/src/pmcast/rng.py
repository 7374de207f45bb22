"""Seeded, splittable random streams.

Every stochastic component derives its generator from (base seed, stream
keys) via a counter-based Philox generator, so any part of a run can be
reproduced in isolation without replaying the rest.
"""

import zlib

import numpy as np


def _as_key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode("utf-8"))


def generator(seed: int, *keys) -> np.random.Generator:
    """Independent Philox stream derived from seed plus stream keys."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_as_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derived_seed(seed: int, *keys) -> int:
    """Stable integer sub-seed, for components that take a plain seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_as_key(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)
