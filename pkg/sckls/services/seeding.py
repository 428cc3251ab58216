"""Counter-based random streams.

Every stream is a Philox generator keyed by ``SeedSequence(master_seed,
spawn_key=(role, *indices))``, so a replicate's draws depend only on its key
and never on the order in which replicates are scheduled.
"""

import numpy as np

GENERATOR_NAME = "numpy.random.Philox(SeedSequence(seed, spawn_key=(role, *index)))"

# Stream roles
DATA = 0
NOISE = 1
BOOTSTRAP = 2
CONTEXT = 3
DERIVED = 4


def stream(master_seed: int, role: int, *index: int) -> np.random.Generator:
    """Independent generator for (master_seed, role, index...)"""
    if master_seed < 0:
        raise ValueError(f"seed must be non-negative, got {master_seed}")
    key = (int(role),) + tuple(int(i) for i in index)
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(master_seed: int, *index: int) -> int:
    """A 63-bit master seed for a nested run, e.g. the bootstrap of one Monte Carlo replicate"""
    if master_seed < 0:
        raise ValueError(f"seed must be non-negative, got {master_seed}")
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(DERIVED,) + tuple(int(i) for i in index))
    hi, lo = (int(v) for v in seq.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) >> 1
