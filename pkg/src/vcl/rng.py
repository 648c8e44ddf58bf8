"""Named, seed-derived random streams.

Every consumer of randomness asks for a stream by name (``split``, ``init``,
``augment``, ``smote``, ``dropout``, ``shuffle``) so adding draws in one
component never shifts the numbers another component sees.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = ("split", "init", "augment", "smote", "dropout", "shuffle")


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    """Return a fresh generator for ``(seed, name, *counters)``.

    Counters let a caller derive per-run or per-image streams without the
    results depending on the order in which the streams are consumed.
    """
    if not name:
        raise ValueError("stream name must be non-empty")
    if seed < 0 or any(c < 0 for c in counters):
        raise ValueError("seed and counters must be non-negative")
    entropy = [seed & 0xFFFFFFFFFFFFFFFF, _name_key(name), *counters]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
