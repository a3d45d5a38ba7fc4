"""Counter-based random streams.

Every random draw is a pure function of (seed, tag, level, sample index,
slot), so the same sample key always reproduces the same field no matter
in which order, batch or process it is evaluated.  Uniforms come from a
splitmix64-style integer hash, normals from the inverse CDF.
"""

import numpy as np
from scipy.special import ndtri

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x):
    with np.errstate(over="ignore"):
        x = (x + _GAMMA).astype(np.uint64) if isinstance(x, np.ndarray) else np.uint64(x) + _GAMMA
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def stream_key(seed, tag, level=0):
    """Fold (seed, tag string, level) into one 64-bit stream key."""
    k = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    for ch in tag:
        k = _mix(k ^ np.uint64(ord(ch)))
    return _mix(k ^ np.uint64(level & 0xFFFFFFFF))


def uniforms(key, index, n_slots):
    """Uniform(0,1) block for one sample index; shape (n_slots,)."""
    return uniforms_block(key, np.asarray([index], dtype=np.uint64), n_slots)[0]


def uniforms_block(key, indices, n_slots):
    """Uniform(0,1) draws for many sample indices; shape (len(indices), n_slots).

    Strictly inside (0,1) so the normal inverse CDF stays finite.
    """
    idx = np.asarray(indices, dtype=np.uint64)
    base = _mix(np.uint64(key) ^ _mix(idx))[:, None]
    slots = _mix(np.arange(n_slots, dtype=np.uint64))[None, :]
    bits = _mix(base ^ slots)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(key, index, n_slots):
    """Standard normal block for one sample index."""
    return ndtri(uniforms(key, index, n_slots))


def normals_block(key, indices, n_slots):
    """Standard normal draws for many sample indices."""
    return ndtri(uniforms_block(key, indices, n_slots))
