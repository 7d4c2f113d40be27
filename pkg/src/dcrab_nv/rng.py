"""Deterministic random streams.

Every random draw in the package comes from a generator derived from
``(seed, purpose, index, kind)`` through :class:`numpy.random.SeedSequence`
spawn keys, so results do not depend on call order or worker count.
"""

from __future__ import annotations

import numpy as np

# purposes
ENSEMBLE = 0
EVALUATION = 1
REEVALUATION = 2
FROZEN = 3
BASIS = 4
COHERENCE = 5
TRACE = 6

# noise kinds
DELTA = 0
EPSILON = 1


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for ``seed`` and an integer key path."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
