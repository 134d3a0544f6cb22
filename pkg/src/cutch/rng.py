"""SplitMix64 streams used for initial data and parameter sampling.

The generator is written out explicitly (rather than using numpy's
``Generator``) so that a seed reproduces the same numbers in any language.
"""

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1

# XOR-ed into the seed to get an independent stream for parameter sampling.
PARAM_STREAM_TAG = 0x5A17_C0DE_0000_0001


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` raw 64-bit outputs of SplitMix64 started at ``seed``."""
    seed = int(seed) & _MASK
    k = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed) + k * np.uint64(GOLDEN_GAMMA)
        return _mix(state)


def uniform01(seed: int, count: int) -> np.ndarray:
    """Outputs mapped to the unit interval as ``mixed / 2**64``."""
    z = splitmix64(seed, count)
    # split into two exact halves so the division is not rounded twice
    hi = (z >> np.uint64(32)).astype(np.float64)
    lo = (z & np.uint64(0xFFFFFFFF)).astype(np.float64)
    return (hi * 2.0**32 + lo) / 2.0**64


def sample_parameters(seed: int, count: int, lo: float, hi: float) -> np.ndarray:
    """Uniform parameter samples in [lo, hi] from the parameter stream."""
    r = uniform01(int(seed) ^ PARAM_STREAM_TAG, count)
    return lo + (hi - lo) * r
