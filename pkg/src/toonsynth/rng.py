"""Counter-based random streams keyed by (master_seed, sample_index, stage).

Each stage of each sample gets its own Philox stream, so a sample's
content never depends on which worker produced it or in what order.
"""
from __future__ import annotations

import zlib

import numpy as np

STAGES = (
    "count",
    "assets",
    "strategy",
    "augment",
    "placement",
    "background",
    "harmonize",
    "kmeans",
)


def _stage_code(stage: str) -> int:
    if stage in STAGES:
        return STAGES.index(stage)
    # unknown tags still map to a stable code
    return 1000 + zlib.crc32(stage.encode("utf-8"))


def stream(master_seed: int, sample_index: int, stage: str) -> np.random.Generator:
    """Independent generator for one stage of one sample."""
    ss = np.random.SeedSequence(int(master_seed) & (2**64 - 1), spawn_key=(int(sample_index), _stage_code(stage)))
    return np.random.Generator(np.random.Philox(ss))


def sample_seed(master_seed: int, sample_index: int) -> int:
    """64-bit seed recorded in layouts for audit."""
    ss = np.random.SeedSequence(int(master_seed) & (2**64 - 1), spawn_key=(int(sample_index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
