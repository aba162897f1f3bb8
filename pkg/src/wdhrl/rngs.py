"""Deterministic random-stream derivation.

Every random decision in the package draws from a generator keyed by a tuple
(seed, purpose, indices...).  Streams derived from distinct keys never share
state, so adding, removing, or reordering one consumer cannot perturb any
other stream; this is what makes runs bitwise reproducible and lets
telemetry coexist with training without touching its randomness.
"""

import hashlib

import numpy as np


def stream_key(*keys) -> int:
    """Stable 128-bit integer derived from the key tuple."""
    tag = "/".join(str(k) for k in keys)
    digest = hashlib.sha256(tag.encode()).digest()
    return int.from_bytes(digest[:16], "little")


def substream(*keys) -> np.random.Generator:
    """Generator keyed by ``keys``; identical keys give identical streams."""
    return np.random.default_rng(stream_key(*keys))


def stable_hash(data: bytes, length: int = 12) -> str:
    """Short hex digest for content identifiers (run ids, state-set ids)."""
    return hashlib.sha256(data).hexdigest()[:length]
