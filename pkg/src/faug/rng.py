"""Named, splittable, counter-based random streams.

Every stochastic routine in the package takes a :class:`Stream`. Streams are
addressed by a path of keys below a root seed, so the stream used for, say,
the hook noise of iteration 3 of the attack on cell (surrogate 2, seed 4) is
the same no matter which process or in which order it is created.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"unsupported stream key {key!r}")


class Stream:
    """A Philox stream identified by ``(seed, path)``."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys) -> "Stream":
        """Independent substream; does not advance this stream."""
        return Stream(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, mu, sigma, shape):
        return self._gen.normal(mu, sigma, size=tuple(shape))

    def uniform(self, low, high, shape):
        return self._gen.uniform(low, high, size=tuple(shape))

    def random(self, shape=None):
        return self._gen.random(size=shape)

    def integers(self, low, high, size=None):
        """Integers in the closed range [low, high]."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Stream(seed={self.seed}, path={self.path})"
