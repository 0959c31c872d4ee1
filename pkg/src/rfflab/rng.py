"""Hierarchical, named random streams.

Every stochastic component asks for ``stream(seed, "purpose", index, ...)``.
The path is folded into a ``SeedSequence`` spawn key, so two components
never share state and results do not depend on execution order.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream path integers must be nonnegative")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported stream path element {part!r}")


def stream(seed, *path):
    """Return a fresh ``numpy.random.Generator`` for ``(seed, *path)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(seed, *path):
    """Derive a 64-bit integer seed, for handing to code that wants an int."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
