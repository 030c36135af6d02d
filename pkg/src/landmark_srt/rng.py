"""Named, splittable random streams.

Every stream is a Philox (counter-based) generator whose 128-bit key is the
first 16 bytes of SHA-256 over ``"<seed>/<name>/<name>..."``. Streams with
different names are independent, and a stream's output depends only on
(seed, names), never on the order other streams were created or consumed.
Philox and SHA-256 are both platform independent, so draws are identical
across machines.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *names) -> int:
    path = "/".join([str(int(seed))] + [str(n) for n in names])
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed: int, *names) -> np.random.Generator:
    """Generator for the sub-stream ``names`` under the root ``seed``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *names)))


def child_seed(seed: int, *names) -> int:
    """A 63-bit integer seed derived from a named sub-stream."""
    return stream_key(seed, *names) & ((1 << 63) - 1)
