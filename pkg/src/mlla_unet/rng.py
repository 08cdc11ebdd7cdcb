"""Seeded random streams.

All randomness goes through numpy's ``Generator`` with the PCG64 bit
generator.  Independent child streams come from ``SeedSequence.spawn``, so
the same seed gives the same weights and data on every platform numpy
supports.
"""

from __future__ import annotations

import os
from typing import List, Optional

import numpy as np

SEED_ENV = "MLLA_SEED"


def default_seed(seed: Optional[int] = None) -> int:
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def split(seed: int, n: int) -> List[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0, dtype=np.float32):
    """Normal(0, std) samples redrawn until they fall inside ``bound`` standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return (z * std).astype(dtype)
