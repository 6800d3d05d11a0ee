"""Counter-keyed random streams.

Every random quantity in a run is drawn from a fresh generator whose seed
is the tuple ``(master_seed, purpose, *counters)``. Draws therefore depend
only on their key, never on how many values were consumed elsewhere, which
keeps replicate runs reproducible and makes slot/round draws independent.
"""

from __future__ import annotations

import numpy as np

# purpose tags
PHI = 1
DATA = 2
CHANNEL = 3
SPLIT = 4
PARTITION = 5
SYNTH = 6
INIT = 7
MONTE_CARLO = 8


def stream(seed: int, purpose: int, *counters: int) -> np.random.Generator:
    """Return the generator for one key tuple."""
    if seed < 0 or any(c < 0 for c in counters):
        raise ValueError("seed and counters must be non-negative")
    return np.random.default_rng([int(seed), int(purpose), *map(int, counters)])
