"""Deterministic random streams with derivable substreams.

A stream is identified by a 64-bit master seed plus a path of child keys.
The same (seed, path, call sequence) always yields the same samples, which
is what makes run manifests reproducible and lets independent workers draw
non-overlapping noise (one child per purpose: data, selector noise, flow
time/noise, parameter init).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"rng child keys must be int or str, got {type(key)!r}")


class Rng:
    """PCG64 stream addressed by (seed, child-key path)."""

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self.path = tuple(_path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, *keys):
        """Independent stream derived from this one; same keys -> same stream."""
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def uniform(self, shape=None):
        return self._gen.random(shape)

    def normal(self, shape=None):
        return self._gen.standard_normal(shape)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def choice_without_replacement(self, n, k):
        """k distinct indices from range(n), in draw order."""
        return self._gen.permutation(n)[:k]

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
