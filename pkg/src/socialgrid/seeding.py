"""Named, nested RNG substreams derived from one master seed.

Every source of randomness in a run (env generation, action sampling,
mini-batch sampling, ...) pulls its own generator via ``substream``, keyed
by a stream name plus integer indices. Streams are independent and fully
determined by (master_seed, name, *indices), so any component can be
re-derived in isolation, which is what makes checkpoint resume exact.
"""

import zlib

import numpy as np

__all__ = ["substream"]


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(master_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return the generator for the (name, *indices) substream of a master seed."""
    entropy = (int(master_seed), _name_key(name)) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(entropy))
