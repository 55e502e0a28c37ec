"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, tag, *indices)``.  A path, a refinement level or a batch therefore
always sees the same numbers no matter how work is scheduled.
"""

from __future__ import annotations

import numpy as np

# stream tags
ENVIRONMENT = 1
CHAIN = 2
DRIVER = 3
AUX = 4


def stream(seed: int, tag: int, *index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(tag), *(int(i) for i in index)))
    return np.random.Generator(np.random.Philox(ss))
