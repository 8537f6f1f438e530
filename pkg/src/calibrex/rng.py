"""Seed splitting.

Every stochastic component draws from its own stream derived from the root
seed as ``SeedSequence(root, spawn_key=(purpose, index))``.  Purposes are the
integer constants below; ``index`` is usually the iteration number, so a
resumed run regenerates exactly the same streams without storing generator
state.
"""

import numpy as np

DESIGN = 0
POOL = 1
FANTASY = 2
HYPER = 3
REDUCER = 4
MEAN = 5
SIMULATOR = 6
SUBSPACE = 7

_NAMES = {
    DESIGN: "design",
    POOL: "pool",
    FANTASY: "fantasy",
    HYPER: "hyper",
    REDUCER: "reducer",
    MEAN: "mean",
    SIMULATOR: "simulator",
    SUBSPACE: "subspace",
}


def stream(root: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Return an independent generator for ``(root, purpose, index)``."""
    if purpose not in _NAMES:
        raise ValueError(f"unknown stream purpose {purpose}")
    seq = np.random.SeedSequence(int(root), spawn_key=(int(purpose), int(index)))
    return np.random.Generator(np.random.PCG64(seq))


def derived_seed(root: int, purpose: int, index: int = 0) -> int:
    """A 32-bit integer seed for consumers that want a plain int (e.g. simulators)."""
    seq = np.random.SeedSequence(int(root), spawn_key=(int(purpose), int(index)))
    return int(seq.generate_state(1, dtype=np.uint32)[0])
