"""Hierarchical seeded random streams.

Every random draw in the package descends from one integer seed through a
path of integer keys (run -> note -> candidate -> step). Two streams with the
same seed and path produce the same numbers no matter which order, or on
which worker, they are consumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Top-level stream keys; keep stable, checkpoints depend on them.
INIT = 0
TRAIN = 1
SAMPLE = 2
EVAL = 3
GRADCHECK = 4


@dataclass(frozen=True)
class Stream:
    seed: int
    path: tuple[int, ...] = ()

    def child(self, *keys: int) -> "Stream":
        for k in keys:
            if int(k) < 0:
                raise ValueError(f"stream keys must be non-negative, got {k}")
        return Stream(self.seed, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        return np.random.default_rng(ss)
