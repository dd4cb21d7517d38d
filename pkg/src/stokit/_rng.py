"""Counter-based keyed random streams.

Every draw is addressed by ``(seed, stream, index)``: the Philox key is
``(seed, stream)`` and ``index`` selects a position in the keyed sequence.
Values therefore do not depend on traversal order or on how work is split
across workers.
"""

import numpy as np
from scipy.special import ndtri

# stream tags
POSITIVE = 0
NEGATIVE = 1
INITIAL = 2
BRIDGE = 3
REFINE_BASE = 1 << 32

_MASK64 = (1 << 64) - 1


def raw(seed, stream, start, count):
    """``count`` uint64 words of stream ``(seed, stream)`` starting at ``start``."""
    block, offset = divmod(int(start), 4)
    key = np.array([int(seed) & _MASK64, int(stream) & _MASK64], dtype=np.uint64)
    gen = np.random.Philox(key=key, counter=block)
    return gen.random_raw(offset + int(count))[offset:]


def uniforms(seed, stream, start, count):
    """Open-interval uniforms in (0, 1) with 53-bit resolution."""
    words = raw(seed, stream, start, count)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(seed, stream, start, count):
    """Standard normals by inverse-CDF of the keyed uniforms."""
    return ndtri(uniforms(seed, stream, start, count))


def derive_seeds(master_seed, n):
    """Per-path 64-bit seeds derived from a master seed, one per path index."""
    return [path_seed(master_seed, i) for i in range(int(n))]


def path_seed(master_seed, index):
    """Seed of path ``index``; depends only on ``(master_seed, index)``."""
    seq = np.random.SeedSequence([int(master_seed) & _MASK64, int(index)])
    return int(seq.generate_state(1, np.uint64)[0])


def refine_stream(level, factor):
    return REFINE_BASE + (int(level) << 16) + int(factor)
