"""Named, splittable random streams over the counter-based Philox generator.

A stream is identified by a base seed plus a path of names/integers, e.g.
``stream(7, "train", "epoch", 3)``. Streams with different paths are
statistically independent, and the same path always yields the same draws.
"""

import hashlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("integer stream keys must be non-negative")
        return int(part)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(seed, *path):
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))


def stream(seed, *path):
    """Return a fresh ``numpy.random.Generator`` for ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *path)))


def derive_seed(seed, *path):
    """A 63-bit integer seed derived deterministically from ``(seed, *path)``."""
    state = seed_sequence(seed, *path).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)
