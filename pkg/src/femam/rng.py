"""Counter-based random streams.

Every random draw in a run is keyed by (seed, purpose, a, b, c), so a
client's mini-batch order in a given round does not depend on how many
draws other clients or other algorithms made before it.
"""

import numpy as np

INIT = 0
SHUFFLE = 1
MAPPING = 2
FINETUNE = 3
DATA = 4
PARTITION = 5
SPLIT = 6
CLIENT_INIT = 7


def stream(seed: int, purpose: int, *counters: int) -> np.random.Generator:
    key = (purpose, *(int(c) for c in counters))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
