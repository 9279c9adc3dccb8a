"""Named random substreams derived from one root seed.

Every stochastic stage draws from its own stream so that changing, say, the
number of training steps never perturbs the synthetic market or discourse.
"""
from __future__ import annotations

import numpy as np

STREAMS = {
    "market": 1,
    "discourse": 2,
    "init": 3,
    "sampling": 4,
}


def substream(root_seed: int, name: str, *extra: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    entropy = [int(root_seed), STREAMS[name], *[int(e) for e in extra]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
