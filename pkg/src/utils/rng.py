"""
Counter-based random streams.

All randomness flows from one integer seed. Each consumer asks for its own
namespace (and optional counters such as an iteration index), which yields an
independent Philox stream that does not depend on call order elsewhere.
"""

import zlib

import numpy as np


def namespace_key(namespace: str) -> int:
    """Stable 32-bit key for a namespace string (crc32, not Python's salted hash)."""
    return zlib.crc32(namespace.encode("utf-8")) & 0xFFFFFFFF


def make_rng(seed: int, namespace: str, *counters: int) -> np.random.Generator:
    """
    Build a generator for `(seed, namespace, *counters)`.

    Args:
        seed: Run-level seed
        namespace: Consumer name, e.g. "synth.phantom" or "optimize.noise"
        *counters: Extra non-negative integers (iteration, item index, ...)

    Returns:
        A numpy Generator backed by the counter-based Philox bit generator
    """
    if seed < 0 or any(c < 0 for c in counters):
        raise ValueError("seed and counters must be non-negative")
    entropy = [int(seed), namespace_key(namespace), *[int(c) for c in counters]]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
