"""Deterministic substreams from a counter-based bit generator.

Streams are numpy Philox generators (a counter-based 64-bit generator
with published round constants).  Keys are derived from integer tags by
chaining the splitmix64 finalizer, whose constants are

    gamma = 0x9E3779B97F4A7C15
    m1    = 0xBF58476D1CE4E5B9
    m2    = 0x94D049BB133111EB

so a stream is a pure function of its integer tags: the same
``(seed, tag, ...)`` tuple yields the same draws on every run and
platform.
"""

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

# fixed tags keeping independent uses of one seed apart
TAG_DATA = 1
TAG_SPLIT = 2
TAG_BOUND = 3
TAG_BATCH = 4
TAG_ESTIMATOR = 5
TAG_SNR = 6
TAG_EVAL = 7
TAG_INIT = 8
TAG_CALIBRATE = 9


def _splitmix(x):
    x = (x + _GAMMA) & _MASK
    x ^= x >> 30
    x = (x * _M1) & _MASK
    x ^= x >> 27
    x = (x * _M2) & _MASK
    x ^= x >> 31
    return x


def derive_key(*tags):
    """Hash a tuple of integers into a 64-bit stream key."""
    h = 0
    for t in tags:
        h = _splitmix(h ^ (int(t) & _MASK))
    return h


def substream(*tags):
    """Philox generator for the stream identified by integer tags."""
    k0 = derive_key(*tags)
    k1 = _splitmix(k0)
    return np.random.Generator(np.random.Philox(key=np.array([k0, k1],
                                                             dtype=np.uint64)))


def child_seed(*tags):
    """A derived integer seed, for APIs that take seeds rather than streams."""
    return derive_key(*tags) >> 1
