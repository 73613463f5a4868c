"""Splittable counter-based random streams.

A stream is addressed by ``(seed, path...)``; every path maps to its own Philox
key, so draws can be generated by any worker in any order and still agree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngKey:
    seed: int
    path: tuple[int, ...] = ()

    def child(self, *index: int) -> "RngKey":
        return RngKey(self.seed, self.path + tuple(int(i) for i in index))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([int(self.seed), len(self.path), *self.path])
        return np.random.Generator(np.random.Philox(ss))


# stream tags keep unrelated consumers on disjoint paths
TAG_COARSE = 1
TAG_PROBE = 2
TAG_EPOCH = 3
TAG_BATCH = 4
TAG_SDATA = 5
