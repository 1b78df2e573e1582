"""Named random substreams fanned out from one global seed."""

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode())


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, _key(name), *(int(e) for e in extra)])


def substream_seed(seed: int, name: str, *extra: int) -> int:
    """A 32-bit integer seed for consumers that take plain ints."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _key(name), *(int(e) for e in extra)])
    return int(ss.generate_state(1)[0])
