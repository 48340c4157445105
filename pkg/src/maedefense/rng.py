"""Named, per-example random streams so every stage is reproducible.

All randomness in the package flows through ``stream(root_seed, name, *key)``:
the same (seed, stage name, example index…) always yields the same generator,
independent of batching or evaluation order.
"""

from __future__ import annotations

import numpy as np

_STAGES = {
    "split": 1,
    "clf-init": 2,
    "clf-train": 3,
    "mae-init": 4,
    "mae-train": 5,
    "mae-train-mask": 6,
    "attack": 7,
    "score-mask": 8,
    "repair": 9,
    "baseline-nd": 10,
    "bootstrap": 11,
    "data-gen": 12,
}


def stream(root_seed: int, stage: str, *key: int) -> np.random.Generator:
    if stage not in _STAGES:
        raise KeyError(f"unknown rng stage {stage!r}; known: {sorted(_STAGES)}")
    ss = np.random.SeedSequence((int(root_seed), _STAGES[stage]) + tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(root_seed: int, stage: str, *key: int) -> int:
    """A single 64-bit seed for the same stream, for recording in artifacts."""
    if stage not in _STAGES:
        raise KeyError(f"unknown rng stage {stage!r}; known: {sorted(_STAGES)}")
    ss = np.random.SeedSequence((int(root_seed), _STAGES[stage]) + tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generator_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))
