"""Deterministic random streams derived from one master seed."""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_int(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    if isinstance(key, float):
        return zlib.crc32(repr(key).encode())
    return zlib.crc32(str(key).encode())


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a stream path.

    Streams with different ``keys`` are statistically independent; the same
    ``(seed, keys)`` always reproduces the same stream, independent of which
    thread or in which order it is requested.
    """
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys) -> int:
    """Integer child seed for APIs that take a plain seed."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(_key_int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
