"""
Identity-balanced batch sampling.

`PKSampler` yields index batches holding P identities with K images each, so
every sample has a same-identity positive and a different-identity negative
in its batch. Order is fixed by the seed.
"""
from __future__ import annotations

import logging

from collections import defaultdict
from typing import Dict, Iterator, List, Sequence

import numpy as np

from ap_attack.core.errors import BatchCompositionError

logger = logging.getLogger(__name__)


class PKSampler:
    """
    Seeded P x K identity sampler.

    Parameters
    ----------
    pids : Sequence[int]
        Identity label of every dataset item.
    p : int
        Identities per batch (at least 2).
    k : int
        Images per identity per batch (at least 1). Identities with fewer
        than K images are sampled with replacement.
    seed : int
        Seed of the shuffling; each epoch draws from `seed + epoch`.
    """

    def __init__(self, pids: Sequence[int], p: int, k: int, seed: int = 0):
        if p < 2:
            raise BatchCompositionError(f"P must be at least 2 to provide negatives, got {p}")
        if k < 1:
            raise BatchCompositionError(f"K must be at least 1, got {k}")
        self.p = p
        self.k = k
        self.seed = seed
        self.index_by_pid: Dict[int, List[int]] = defaultdict(list)
        for index, pid in enumerate(pids):
            self.index_by_pid[int(pid)].append(index)
        if len(self.index_by_pid) < p:
            raise BatchCompositionError(
                f"Dataset has {len(self.index_by_pid)} identities, fewer than P={p}"
            )

    def __len__(self) -> int:
        return len(self.index_by_pid) // self.p

    def batches(self, epoch: int = 0) -> Iterator[List[int]]:
        """Index batches of one epoch; every identity appears at most once."""
        rng = np.random.default_rng(self.seed + epoch)
        pids = sorted(self.index_by_pid)
        order = rng.permutation(len(pids))
        for start in range(0, len(self) * self.p, self.p):
            batch: List[int] = []
            for position in order[start : start + self.p]:
                candidates = self.index_by_pid[pids[position]]
                chosen = rng.choice(
                    len(candidates), size=self.k, replace=len(candidates) < self.k
                )
                batch.extend(candidates[c] for c in chosen)
            yield batch

    def __iter__(self) -> Iterator[List[int]]:
        return self.batches(0)
