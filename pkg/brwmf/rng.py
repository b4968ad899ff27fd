"""
Counter-derived random streams.

Every stream is keyed by (master_seed, replica, purpose) so a replica draws
the same numbers whatever order or process it runs in.
"""

import numpy as np

# purposes
TREE = 0
PATHS = 1
MONTE_CARLO = 2


def stream(master_seed, replica=0, purpose=TREE):
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(replica), int(purpose)))
    return np.random.Generator(np.random.PCG64(seq))


def replica_seeds(master_seed, replicas):
    """Seed keys recorded in the run manifest, one per replica."""
    return [[int(master_seed), r] for r in range(replicas)]
