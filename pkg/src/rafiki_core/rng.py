"""Seed splitting.

Every random stream in a run is derived from one root seed.  A stream is
identified by a component name plus integer counters (repeat index, worker
index, episode number, ...).  The name is hashed with CRC-32 and the tuple
``(crc, *counters)`` becomes the ``spawn_key`` of a ``SeedSequence`` rooted at
the root seed; the resulting state keys a Philox counter-based generator.
Two streams with different names or counters are statistically independent,
and the same (root, name, counters) always reproduces the same stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str, *counters: int) -> tuple[int, ...]:
    return (zlib.crc32(name.encode("utf-8")),) + tuple(int(c) for c in counters)


def make_rng(root_seed: int, name: str, *counters: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(root_seed), spawn_key=stream_key(name, *counters))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(root_seed: int, name: str, *counters: int) -> int:
    """A non-negative 63-bit integer seed for APIs that want a plain int."""
    ss = np.random.SeedSequence(int(root_seed), spawn_key=stream_key(name, *counters))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
