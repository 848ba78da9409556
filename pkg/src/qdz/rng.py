"""Seeded counter-based random streams.

A stream is a Philox generator keyed by ``(seed, *keys)``; element ``i`` of a
draw always consumes the ``i``-th counter block, so results depend only on
the key tuple and never on call order elsewhere.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def derive(seed: int, *keys: int) -> int:
    """A 32-bit integer seed for APIs that want a plain int."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(k) & 0xFFFFFFFF for k in keys)])
    return int(ss.generate_state(1)[0])
