"""Named random substreams.

Every random decision in the package flows from a single root seed through
a named substream, so any component (data, init, shuffle order, pruning,
PGD) can be reproduced in isolation.  Labels are hashed with BLAKE2s, which
is stable across platforms and Python versions.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _entropy(root_seed: int, labels) -> int:
    h = hashlib.blake2s(digest_size=16)
    h.update(str(int(root_seed)).encode("ascii"))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def substream(root_seed: int, *labels) -> np.random.Generator:
    """Return a Generator for the substream named by ``labels``.

    The same (root_seed, labels) always yields the same stream; distinct
    labels yield statistically independent streams.
    """
    return np.random.default_rng(np.random.SeedSequence(_entropy(root_seed, labels)))


def derive_seed(root_seed: int, *labels) -> int:
    """A 62-bit integer seed for handing to another seeded component."""
    return _entropy(root_seed, labels) % (1 << 62)
