"""Named random streams derived from one root seed.

Every consumer of randomness gets its own stream so that toggling one
feature (say, augmentation) cannot shift the draws seen by another (say,
cropping). Per-iteration consumers additionally fold the step counter into
the seed material, which makes a resumed run reproduce the exact generator
a continuous run would have built at that step.
"""

import numpy as np

STREAM_INIT = 0
STREAM_PAIR = 1
STREAM_CROP = 2
STREAM_AUGMENT = 3
STREAM_NOISE = 4
STREAM_FEATURE = 5
STREAM_RASTER = 6


def stream_rng(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    """Generator for (root seed, stream id, step); same triple, same draws."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed), int(stream), int(step)])))
