"""Counter-based random numbers and seed derivation.

Every random stream in the package is addressed by a 64-bit key and a
counter. A uniform variate is the SplitMix64 finalizer applied to
``key + counter * golden``, so any draw can be recomputed without replaying
the stream, and streams for different keys never share state. Keys are
derived from a user seed with ``numpy.random.SeedSequence``; worker or
replicate ``k`` of seed ``s`` always receives ``derive_seed(s, k)``.
"""

import numpy as np
from numba import njit, uint64

_GOLDEN = uint64(0x9E3779B97F4A7C15)
_MIX1 = uint64(0xBF58476D1CE4E5B9)
_MIX2 = uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0

SEED_MASK = (1 << 64) - 1


def _check_seed(seed):
    seed = int(seed)
    if seed < 0 or seed > SEED_MASK:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return seed


def derive_seed(seed, k):
    """Seed for sub-stream ``k`` of ``seed`` (replicate, worker or chunk)."""
    ss = np.random.SeedSequence([_check_seed(seed), int(k)])
    return int(ss.generate_state(1, np.uint64)[0])


def derive_seeds(seed, start, stop):
    """Vector of ``derive_seed(seed, k)`` for ``k`` in ``range(start, stop)``."""
    return np.array([derive_seed(seed, k) for k in range(start, stop)], dtype=np.uint64)


def stream_keys(seed):
    """Two independent keys for one seed: (uniform-stream key, count-stream key)."""
    ss = np.random.SeedSequence(_check_seed(seed))
    state = ss.generate_state(2, np.uint64)
    return np.uint64(state[0]), np.uint64(state[1])


def count_generator(key):
    """numpy Generator used for the few non-uniform scalar draws (Poisson counts)."""
    return np.random.Generator(np.random.Philox(key=int(key)))


@njit(inline="always", cache=True)
def mix64(z):
    z = (z ^ (z >> uint64(30))) * _MIX1
    z = (z ^ (z >> uint64(27))) * _MIX2
    return z ^ (z >> uint64(31))


@njit(inline="always", cache=True)
def uniform(key, ctr):
    """Uniform double in [0, 1) for (key, counter)."""
    return (mix64(key + uint64(ctr) * _GOLDEN) >> uint64(11)) * _INV53


@njit(inline="always", cache=True)
def uniform_open(key, ctr):
    """Uniform double in (0, 1], safe for logarithms."""
    return 1.0 - uniform(key, ctr)


@njit(inline="always", cache=True)
def normal_pair(key, ctr):
    """Two independent standard normals from counters ctr, ctr + 1 (Box-Muller)."""
    u1 = uniform_open(key, ctr)
    u2 = uniform(key, ctr + 1)
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    return rad * np.cos(ang), rad * np.sin(ang)


@njit(cache=True)
def uniform_array(key, start, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = uniform(key, start + i)
    return out
