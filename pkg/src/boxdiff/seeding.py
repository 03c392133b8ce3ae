"""Named random substreams derived from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode())


def substream(seed: int, *names) -> np.random.Generator:
    """Generator for the substream ``names`` of ``seed``; same inputs, same stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(ss)
