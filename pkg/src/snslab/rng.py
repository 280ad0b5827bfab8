"""Counter-based random streams.

A :class:`Stream` is a master seed plus a path of integer coordinates. Its
Philox key is derived from ``SeedSequence(seed, spawn_key=path)``; draws for
step ``n`` use counter ``[0, 0, 0, n]``, so any (stream, step) pair can be
regenerated on its own, in any order, on any worker. Adding samples or steps
never perturbs existing ones.

Ensembles draw in fixed blocks of ``BLOCK`` samples: sample ``i`` of an
ensemble reads row ``i % BLOCK`` of the draw made by child stream
``i // BLOCK``.
"""

from __future__ import annotations

import functools
import zlib
from dataclasses import dataclass

import numpy as np


def _coord(c) -> int:
    if isinstance(c, str):
        return zlib.crc32(c.encode("utf-8"))
    c = int(c)
    if c < 0:
        raise ValueError("stream coordinates must be non-negative")
    return c


@dataclass(frozen=True)
class Stream:
    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "path", tuple(_coord(c) for c in self.path))

    def child(self, *coords) -> "Stream":
        return Stream(self.seed, self.path + tuple(_coord(c) for c in coords))

    @functools.cached_property
    def key(self) -> np.ndarray:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.path)
        return ss.generate_state(2, dtype=np.uint64)

    def generator(self, step: int = 0) -> np.random.Generator:
        counter = np.array([0, 0, 0, int(step)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self.key, counter=counter))

    def normals(self, size, step: int = 0) -> np.ndarray:
        return self.generator(step).standard_normal(size)

    def as_list(self) -> list[int]:
        return [int(self.seed), *self.path]


BLOCK = 256


def ensemble_normals(stream: Stream, n_samples: int, size: int, step: int = 0, start: int = 0) -> np.ndarray:
    """Normals of shape ``(n_samples, size)`` for samples ``start .. start + n_samples - 1``."""
    out = np.empty((n_samples, size))
    i = start
    stop = start + n_samples
    while i < stop:
        block, row = divmod(i, BLOCK)
        take = min(BLOCK - row, stop - i)
        draw = stream.child(block).normals((BLOCK, size), step)
        out[i - start:i - start + take] = draw[row:row + take]
        i += take
    return out
