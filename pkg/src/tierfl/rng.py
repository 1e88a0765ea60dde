"""Deterministic random-stream derivation.

Every random draw in a run comes from a stream keyed by
(seed, purpose, round, node).  Streams are independent Philox generators,
so device-level work can run on any number of workers without changing the
draws, and toggling one purpose (e.g. noise) never perturbs another
(e.g. minibatch sampling).
"""
from __future__ import annotations

import numpy as np

# Purpose tags keep the per-purpose stream hierarchies disjoint.
INIT = 0
DATA = 1
BATCH = 2
NOISE = 3
PARTICIPATION = 4


def stream(seed: int, purpose: int, *path: int) -> np.random.Generator:
    """Return the generator for (seed, purpose, *path).

    The same key always yields an identical stream; distinct keys yield
    independent streams.  Path components must be non-negative ints.
    """
    key = [int(seed), int(purpose), *[int(p) for p in path]]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def stream_name(purpose: int, *path: int) -> str:
    """Readable stream id recorded in the noise ledger."""
    tag = {INIT: "init", DATA: "data", BATCH: "batch",
           NOISE: "noise", PARTICIPATION: "part"}[purpose]
    return ":".join([tag, *[str(p) for p in path]])
