"""Keyed random streams.

Every stochastic draw in a run is made from a generator keyed by
``(global_seed, client_id, round, purpose)`` so that results do not depend on
the order in which clients are evaluated.
"""

import zlib

import numpy as np


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(global_seed: int, client_id: int = -1, round_idx: int = -1, purpose: str = "") -> np.random.Generator:
    # SeedSequence wants non-negative entropy words; shift the -1 sentinels.
    key = [int(global_seed), int(client_id) + 1, int(round_idx) + 1, purpose_code(purpose)]
    return np.random.default_rng(np.random.SeedSequence(key))
