"""Seeded random streams.

Every random draw in the package comes from a numpy PCG64 generator whose
SeedSequence is built from ``(master seed, key...)``.  Keys are spawn keys,
so any tuple of non-negative integers addresses an independent stream and
no coordination between workers is needed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

GENERATOR_NAME = "numpy.random.PCG64/SeedSequence(spawn_key)"
DEFAULT_SEED = 20240611

_MASK64 = (1 << 64) - 1


def generator_version() -> str:
    return f"{GENERATOR_NAME} numpy=={np.__version__}"


@dataclass(frozen=True)
class RngSeed:
    master: int
    stream: int = 0

    def __post_init__(self):
        for name in ("master", "stream"):
            v = getattr(self, name)
            if not (0 <= v <= _MASK64):
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {v}")

    def generator(self) -> np.random.Generator:
        return stream_rng(self.master, self.stream)

    def child(self, index: int) -> RngSeed:
        """Seed for item `index` of a batch based at this stream."""
        return RngSeed(self.master, (self.stream + index) & _MASK64)


def stream_rng(master: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def label_key(label: str) -> int:
    """Stable 63-bit integer for a text label (method names, scenario labels)."""
    digest = hashlib.sha256(label.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def as_seed(seed) -> RngSeed:
    if isinstance(seed, RngSeed):
        return seed
    if seed is None:
        return RngSeed(DEFAULT_SEED)
    return RngSeed(int(seed))
