"""Seed derivation: 64-bit splitmix of (master seed, stable purpose-tag hash)."""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def tag_hash(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")


def derive_seed(master: int, *tags: object) -> int:
    """Independent stream id for ``tags`` under ``master``.

    Adding a new consumer with a new tag never shifts existing streams.
    """
    s = splitmix64(int(master) & _MASK)
    for t in tags:
        s = splitmix64(s ^ tag_hash(str(t)))
    return s


def rng(master: int, *tags: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))
