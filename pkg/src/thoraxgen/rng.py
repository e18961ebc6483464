"""Counter-based random streams.

Every stochastic draw in the package flows through a named substream so
that runs are reproducible and resumable: the stream for (seed, tags...)
is a pure function of its key, independent of draw order elsewhere.
"""

import hashlib

import numpy as np


def substream(seed: int, *tags) -> np.random.Generator:
    """Return an independent generator keyed by (seed, tags).

    Tags may be ints or strings; the key is a 128-bit hash of the tuple,
    used as a Philox key. Identical (seed, tags) always yields an
    identical stream.
    """
    payload = repr((int(seed),) + tuple(tags)).encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
