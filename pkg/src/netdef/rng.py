"""Named, reproducible random sub-streams derived from one master seed.

Every consumer of randomness (topology generation, entry-node choice,
vulnerability draws, the red agent, policy init, rollout sampling, ...)
gets its own stream keyed by a purpose path, so results do not depend on
call ordering between unrelated components.
"""

from __future__ import annotations

import hashlib
import random

import numpy as np


def derive_seed(master: int, *path: object) -> int:
    """Stable 64-bit child seed for (master, *path); path items via repr."""
    h = hashlib.blake2b(digest_size=8)
    h.update(repr((int(master),) + tuple(path)).encode())
    return int.from_bytes(h.digest(), "little")


def substream(master: int, *path: object) -> random.Random:
    """stdlib Random stream for the simulator side (choice/gauss/uniform)."""
    return random.Random(derive_seed(master, *path))


def np_stream(master: int, *path: object) -> np.random.Generator:
    """numpy Generator stream for the numerics side (arrays, permutations)."""
    return np.random.default_rng(derive_seed(master, *path))
