"""Seeded random streams.

Every random draw in the package comes from a Philox counter-based generator
keyed by a single user seed plus a tuple of integer salts (subcommand, cell,
block, ...).  Streams with distinct salts are statistically independent, and a
stream's output never depends on which thread consumes it.
"""

import zlib

import numpy as np

MASK64 = (1 << 64) - 1

# Named salts keep stream keys readable at the call site.
SALT_INIT = 1
SALT_CHAIN = 2
SALT_TARGET = 3
SALT_DIRECTION = 4
SALT_MAXSW = 5
SALT_REFERENCE = 6
SALT_PROBE = 7
SALT_SUBSAMPLE = 8


def label(name):
    """Stable integer salt for a string label."""
    return zlib.crc32(name.encode("utf-8"))


def stream(seed, *salt):
    """Return an independent ``numpy.random.Generator`` for ``(seed, *salt)``."""
    seed = int(seed) & MASK64
    key = tuple(int(s) & MASK64 for s in salt)
    ss = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def as_generator(rng):
    """Accept a Generator, an int seed or None."""
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(0 if rng is None else rng)
