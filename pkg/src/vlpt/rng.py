"""Deterministic random streams.

A RngState is a node in a seed tree: `fork(*tags)` derives an independent
child stream from the root seed plus a path of string/int tags. Identical
seed and identical call sequence give identical draws, and forked streams
never depend on how much the parent was consumed, which keeps sampling
reproducible across workers and across save/resume boundaries.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_u32(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    raise TypeError(f"rng tags must be int or str, got {type(tag).__name__}")


class RngState:
    """Seeded random stream with deterministic forking."""

    __slots__ = ("seed", "key", "_gen")

    def __init__(self, seed: int, key: tuple = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        self._gen = None

    def fork(self, *tags) -> "RngState":
        """Derive an independent child stream named by `tags`."""
        return RngState(self.seed, self.key + tuple(_tag_to_u32(t) for t in tags))

    @property
    def generator(self) -> np.random.Generator:
        """The underlying numpy generator; draws advance this stream."""
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def __repr__(self):
        return f"RngState(seed={self.seed}, key={self.key})"


def as_generator(rng) -> np.random.Generator:
    """Accept either an RngState or a numpy Generator."""
    if isinstance(rng, RngState):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngState or numpy Generator, got {type(rng).__name__}")
