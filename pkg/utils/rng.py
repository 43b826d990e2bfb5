"""
Splittable random keys for reproducible, thread-count independent runs.

A key is a run seed plus a path of split indices. Streams are drawn from a
Philox counter-based generator keyed by ``SeedSequence(seed, spawn_key=path)``,
so the stream for a path is a pure function of (seed, path) and never depends
on the order in which other streams were consumed.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np


# Operator stream indices used under a (generation, slot) key.
EVALUATE = 0
SELECT = 1
CROSSOVER = 2
MUTATE = 3


@dataclass(frozen=True)
class RngKey:
    """Opaque splittable random state."""
    seed: int
    path: Tuple[int, ...] = ()

    def split(self, index: int) -> "RngKey":
        """Derive the child key at `index`; distinct indices give distinct streams."""
        if index < 0:
            raise ValueError(f"split index must be non-negative, got {index}")
        return RngKey(self.seed, self.path + (int(index),))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this key's stream."""
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(sequence))

    def __str__(self) -> str:
        return f"RngKey({self.seed}:{'/'.join(str(i) for i in self.path)})"
