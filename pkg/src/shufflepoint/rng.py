"""Named random sub-streams derived from one integer seed."""

import numpy as np

STREAMS = {"init": 1, "augment": 2, "dropout": 3, "synth": 4, "shuffle": 5, "split": 6, "bench": 7}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; ``extra`` keys (epoch, batch...) fork it further."""
    return np.random.default_rng([int(seed), STREAMS[name], *map(int, extra)])
