"""Named random streams derived from a single 64-bit seed.

Every source of randomness in the package (topology draws, parameter
init, shuffling, probe points) pulls from its own named stream so that
fixing one seed fixes the whole run, and consuming draws in one stream
never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for stream `name` under `seed`.

    Repeated calls with the same (seed, name) give independent generator
    objects with identical state, so call sites own their own cursor.
    """
    if not isinstance(name, str) or not name:
        raise ValueError("stream name must be a non-empty string")
    tag = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & _MASK64, tag])
    return np.random.Generator(np.random.PCG64(ss))
