"""Named random substreams derived from one root seed.

Every consumer (weight init, rollouts, minibatch shuffles, dropout, data
generation) draws from its own generator so toggling one component does not
shift the random numbers seen by another.
"""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return a generator keyed on ``(seed, name, *extra)``."""
    entropy = [int(seed) & 0xFFFFFFFF, stream_key(name), *(int(e) for e in extra)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
