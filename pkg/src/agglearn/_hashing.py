"""Stable 64-bit hashing and a counter-based Gaussian generator.

Everything here is vectorized over numpy ``uint64`` arrays and independent
of platform, process and iteration order.
"""

import hashlib

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO53 = float(2**53)


def splitmix64(z):
    """Finalizer of the splitmix64 generator, applied elementwise."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def combine(a, b):
    """Order-sensitive mix of two uint64 hashes."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return splitmix64(a * _GOLDEN + splitmix64(b))


def token_hash(parts, salt=0):
    """Keyed BLAKE2b-64 of ``parts`` joined by the 0x1F unit separator."""
    data = b"\x1f".join(str(p).encode("utf-8") for p in parts)
    key = int(salt).to_bytes(8, "little", signed=False)
    digest = hashlib.blake2b(data, digest_size=8, key=key).digest()
    return np.uint64(int.from_bytes(digest, "little"))


def _unit_uniform(bits):
    # top 53 bits -> (0, 1], never exactly 0 so log() is safe
    return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO53


def counter_gaussian(seed, stream, counters):
    """Standard normal draws keyed on ``(seed, stream, counter)``.

    The draw for a given counter does not depend on which other counters
    are requested or in which order, so noise for a coordinate is the same
    however a report is sharded.
    """
    counters = np.asarray(counters, dtype=np.int64).astype(np.uint64)
    key = combine(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF), np.uint64(stream))
    base = combine(key, counters)
    u1 = _unit_uniform(splitmix64(base ^ np.uint64(0x1)))
    u2 = _unit_uniform(splitmix64(base ^ np.uint64(0x2)))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
