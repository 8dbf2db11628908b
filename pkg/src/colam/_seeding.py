"""Named random sub-streams derived from a single master seed."""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return a generator that depends only on ``seed``, ``name`` and ``extra``.

    Components that draw from different names never perturb each other, so a
    shuffle order is unchanged whether or not (say) peer sampling runs.
    """
    return np.random.default_rng([int(seed), stream_key(name), *map(int, extra)])
