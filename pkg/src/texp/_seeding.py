"""Seed derivation shared by every stochastic component.

All randomness flows through numpy's ``SeedSequence`` so that a child stream
depends only on ``(seed, *keys)`` and never on evaluation order.
"""

import numpy as np

_MASK64 = (1 << 64) - 1

# stream identifiers, kept stable so outputs are reproducible across versions
STREAM_CHAIN = 1
STREAM_BENIGN = 2
STREAM_MALICIOUS = 3
STREAM_REFERENCE = 4
STREAM_KINDS = 5
STREAM_API_POOL = 6
STREAM_MASKS = 7
STREAM_SPLIT = 8
STREAM_INIT = 9
STREAM_SHUFFLE = 10


def seed_sequence(seed, *keys):
    return np.random.SeedSequence([int(seed) & _MASK64, *(int(k) & _MASK64 for k in keys)])


def derive_rng(seed, *keys):
    """Generator for the child stream ``(seed, *keys)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def mix(seed, index):
    """Deterministic 64-bit child seed for item ``index`` of stream ``seed``."""
    return int(seed_sequence(seed, index).generate_state(1, np.uint64)[0])
