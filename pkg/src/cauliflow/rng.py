"""Deterministic random streams.

All randomness in this package flows from one 64-bit seed. Substreams are
derived by hashing a tuple of string/int labels into a Philox key, so any
component can get an independent, reproducible generator without threading
generator objects through every call site. Philox is counter-based: streams
with different keys never collide.
"""

import hashlib

import numpy as np


def derive(seed, *labels):
    """Return a numpy Generator for the stream named by ``labels``.

    Same (seed, labels) always yields the same stream, independent of
    process state or hash randomization.
    """
    tag = "/".join(str(x) for x in labels).encode("utf-8")
    digest = hashlib.sha256(tag).digest()
    sub = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF, sub], dtype=np.uint64)))
