"""64-bit mixing, token hashing and a counter-based uniform generator.

Everything here is defined on unsigned 64-bit integers with wrap-around
arithmetic, so the same inputs give the same bits on every platform.
"""

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

_U64 = np.uint64


def fmix64(z):
    """splitmix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def fmix64_array(z):
    """Vectorised :func:`fmix64` over a uint64 array."""
    z = np.asarray(z, dtype=_U64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _U64(_M1)
        z = (z ^ (z >> _U64(27))) * _U64(_M2)
        return z ^ (z >> _U64(31))


def mix_seed(base_seed, instance_id, path_index):
    """Derive the seed of one exploration path."""
    a = fmix64((base_seed ^ fmix64((instance_id + GOLDEN) & MASK64)) & MASK64)
    return fmix64((a + (path_index + 1) * GOLDEN) & MASK64)


def mix_seed_array(base_seed, instance_ids, path_indices):
    ids = np.asarray(instance_ids, dtype=_U64)
    paths = np.asarray(path_indices, dtype=_U64)
    with np.errstate(over="ignore"):
        a = fmix64_array(_U64(base_seed & MASK64) ^ fmix64_array(ids + _U64(GOLDEN)))
        return fmix64_array(a + (paths + _U64(1)) * _U64(GOLDEN))


def uniform(seed, counter):
    """Uniform double in [0, 1) for position ``counter`` of stream ``seed``."""
    z = fmix64((seed + (counter + 1) * GOLDEN) & MASK64)
    return (z >> 11) * 2.0**-53


def uniform_array(seeds, counters):
    seeds = np.asarray(seeds, dtype=_U64)
    counters = np.asarray(counters, dtype=_U64)
    with np.errstate(over="ignore"):
        z = fmix64_array(seeds + (counters + _U64(1)) * _U64(GOLDEN))
    return (z >> _U64(11)).astype(np.float64) * 2.0**-53


def seed_sequence(seed, n):
    """``n`` successive splitmix64 outputs starting from ``seed``."""
    out = []
    state = seed & MASK64
    for _ in range(n):
        state = (state + GOLDEN) & MASK64
        out.append(fmix64(state))
    return out


def token_of(raw):
    """Map a raw categorical string to its 64-bit value token."""
    return int.from_bytes(hashlib.blake2b(raw.encode("utf-8"), digest_size=8).digest(), "little")


def digest64(data):
    """64-bit content digest of a bytes object, as 16 hex characters."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def file_digest(path, chunk=1 << 20):
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()
