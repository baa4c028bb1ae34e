"""Reproducible random streams.

Every random draw in the package comes from a counter-based generator
(Philox) keyed by an explicit integer path, so substreams for different
layers / trials / purposes never collide and adding a consumer does not
perturb the draws of existing ones.
"""

import numpy as np


def substream(master_seed, *path):
    """Return an independent ``numpy.random.Generator`` for (master_seed, *path).

    The same (master_seed, path) always yields the identical stream.
    """
    entropy = (int(master_seed),) + tuple(int(p) for p in path)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
